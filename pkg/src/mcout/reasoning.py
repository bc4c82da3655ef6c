"""Continuous-thought reasoning loop.

Starting from the decoder's last hidden state, each iteration turns that
state into a thought vector, appends the thought to the input sequence as a
new (always unmasked) position and re-runs the decoder to get the next last
hidden state. Two thought generators are provided:

* ``Variant.BASE``  - the last hidden state itself.
* ``Variant.MULTI`` - the last hidden state used as a query into the visual
  embeddings through multi-head attention, projected back and layer-normed.

Training combines an answer loss evaluated after every thought with the loss
after the final thought: ``total = mu * sum(aux) + final``.
"""

from __future__ import annotations

import contextlib
import enum
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .errors import ConfigError, ContractError, ShapeError
from .model import InterleavedBatch, KVCache, VisionLanguageModel, last_hidden
from .tensor import Tensor, concat, no_grad, scale


# The thought Norm must give norm sqrt(D) even for small pre-norm vectors
# (near-blank images), so its eps is negligible next to any realistic variance.
LATENT_NORM_EPS = 1e-12


class Variant(str, enum.Enum):
    BASE = "base"
    MULTI = "multi"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown variant {value!r}; expected 'base' or 'multi'") from None


@dataclass
class ReasoningConfig:
    n_thoughts: int = 5
    variant: Variant = Variant.BASE
    backprop_through_loop: bool = True
    detach_thoughts: bool = False
    use_cache: bool = True

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        if self.n_thoughts < 0:
            raise ConfigError(f"n_thoughts must be >= 0, got {self.n_thoughts}")


@dataclass
class LatentAttentionParams:
    proj_weight: Tensor
    proj_bias: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    proj_back_weight: Tensor
    proj_back_bias: Tensor
    norm_gain: Tensor
    norm_bias: Tensor
    n_heads: int

    @classmethod
    def from_model(cls, model: VisionLanguageModel):
        p = model.params
        return cls(
            p["latent.proj.weight"], p["latent.proj.bias"],
            p["latent.attn.wk"], p["latent.attn.wv"], p["latent.attn.wo"],
            p["latent.proj_back.weight"], p["latent.proj_back.bias"],
            p["latent.norm.gain"], p["latent.norm.bias"],
            model.cfg.latent_heads,
        )


@dataclass
class ThoughtEmbedding:
    h_t: Tensor
    k: int = 0
    pre_norm: np.ndarray = None
    attn_weights: np.ndarray = None


def base_thought(h_l, k=0):
    """The last hidden state reused unchanged as a B x 1 x D thought."""
    return ThoughtEmbedding(h_l.reshape(h_l.shape[0], 1, h_l.shape[-1]), k)


def multimodal_latent_attention(h_l, e_m, params: LatentAttentionParams, k=0):
    """``Norm(ProjBack(MultiHeadAttn(Proj(h_l), e_m)))`` as a B x 1 x D thought.

    ``h_l`` is B x D and queries the B x S_m x D context ``e_m``.
    """
    if h_l.ndim != 2 or e_m.ndim != 3:
        raise ShapeError(f"expected h_l B x D and e_m B x S_m x D, got {h_l.shape} and {e_m.shape}")
    B, D = h_l.shape
    if e_m.shape[1] == 0:
        raise ContractError("multimodal context e_m is empty (S_m = 0)")
    if e_m.shape[0] != B or e_m.shape[2] != D:
        raise ShapeError(f"h_l {h_l.shape} and e_m {e_m.shape} disagree")
    H = params.n_heads
    if D % H:
        raise ShapeError(f"{H} heads do not divide D={D}")
    dh, S_m = D // H, e_m.shape[1]
    q = F.linear(h_l, params.proj_weight, params.proj_bias).reshape(B, 1, H, dh).transpose(0, 2, 1, 3)
    keys = F.linear(e_m, params.wk).reshape(B, S_m, H, dh).transpose(0, 2, 1, 3)
    values = F.linear(e_m, params.wv).reshape(B, S_m, H, dh).transpose(0, 2, 1, 3)
    att, weights = F.scaled_dot_attention(q, keys, values)
    att = F.linear(att.transpose(0, 2, 1, 3).reshape(B, 1, D), params.wo)
    pre = F.linear(att, params.proj_back_weight, params.proj_back_bias)
    h_t = F.layer_norm(pre, params.norm_gain, params.norm_bias, eps=LATENT_NORM_EPS)
    return ThoughtEmbedding(h_t, k, pre_norm=pre.data[:, 0].copy(), attn_weights=weights.data.copy())


@dataclass
class AnswerTargets:
    """Teacher-forcing inputs and next-token targets for the answers.

    ``inputs`` (B x A) are the answer tokens fed after the reasoning state;
    ``targets`` (B x A+1) are what each position must predict (answer then
    end token, ``IGNORE_INDEX`` beyond), the first coming from the last
    hidden state of the state itself.
    """

    inputs: np.ndarray
    input_mask: np.ndarray
    targets: np.ndarray

    @classmethod
    def from_sequences(cls, answers, eos_id, pad_id=0):
        if not answers or any(len(a) == 0 for a in answers):
            raise ContractError("answer targets must be non-empty for every sample")
        B, A = len(answers), max(len(a) for a in answers)
        inputs = np.full((B, A), pad_id, dtype=np.int64)
        mask = np.zeros((B, A), dtype=np.int64)
        targets = np.full((B, A + 1), F.IGNORE_INDEX, dtype=np.int64)
        for i, a in enumerate(answers):
            inputs[i, : len(a)] = a
            mask[i, : len(a)] = 1
            targets[i, : len(a)] = a
            targets[i, len(a)] = eos_id
        return cls(inputs, mask, targets)


@dataclass
class ReasoningState:
    embeds: Tensor
    mask: np.ndarray
    cache: KVCache
    h_last: Tensor
    e_m: Tensor
    k: int = 0

    @property
    def seq_len(self):
        return self.embeds.shape[1]


@dataclass
class IterationRecord:
    """Snapshot of iteration ``k``: thought h_t^(k) and the resulting h_l^(k)."""

    k: int
    h_l: np.ndarray
    h_t: np.ndarray
    h_t_pre_norm: np.ndarray = None
    attn_weights: np.ndarray = None
    aux_loss: float = None


@dataclass
class LossBreakdown:
    aux: list
    final: float
    mu: float
    total: float

    def composition_error(self):
        return abs(self.total - (self.mu * sum(self.aux) + self.final))

    def to_dict(self):
        return {"aux": list(self.aux), "final": self.final, "mu": self.mu, "total": self.total}


@dataclass
class ReasoningTrace:
    initial_h_l: np.ndarray
    records: list = field(default_factory=list)
    loss: LossBreakdown = None
    # graph-connected answer losses after 1..N_t thoughts (training only)
    aux_tensors: list = field(default_factory=list, repr=False)
    final_tensor: Tensor = field(default=None, repr=False)

    def __len__(self):
        return len(self.records)


def _snapshot(t):
    return np.array(t.data, dtype=np.float64)


def answer_loss(model, state: ReasoningState, answers: AnswerTargets, training=False):
    """Cross-entropy of the answer tokens continuing ``state``."""
    B = state.h_last.shape[0]
    heads = [state.h_last.reshape(B, 1, state.h_last.shape[-1])]
    if answers.inputs.shape[1]:
        mask = np.concatenate([state.mask, answers.input_mask], axis=1)
        hs = model.forward(model.embed_tokens(answers.inputs), mask, state.cache, training=training)
        heads.append(hs.h)
    logits = model.logits(concat(heads, axis=1))
    return F.cross_entropy(logits, answers.targets)


def initial_state(model, batch: InterleavedBatch, training=False):
    hs = model.forward(batch.embeds, batch.mask, training=training)
    return ReasoningState(
        embeds=batch.embeds,
        mask=batch.mask,
        cache=hs.cache,
        h_last=last_hidden(hs.h, batch.mask),
        e_m=batch.visual,
        k=0,
    )


def make_thought(model, state: ReasoningState, cfg: ReasoningConfig):
    k = state.k + 1
    if cfg.variant is Variant.BASE:
        return base_thought(state.h_last, k)
    return multimodal_latent_attention(state.h_last, state.e_m, LatentAttentionParams.from_model(model), k)


def reasoning_step(model, state: ReasoningState, cfg: ReasoningConfig, training=False):
    """Append one thought and recompute the last hidden state.

    Returns ``(new_state, thought)``.
    """
    thought = make_thought(model, state, cfg)
    h_t = thought.h_t.detach() if cfg.detach_thoughts else thought.h_t
    B = h_t.shape[0]
    embeds = concat([state.embeds, h_t], axis=1)
    mask = np.concatenate([state.mask, np.ones((B, 1), dtype=state.mask.dtype)], axis=1)
    if cfg.use_cache:
        hs = model.forward(h_t, mask, state.cache, training=training)
        h_last = hs.h.reshape(B, hs.h.shape[-1])
    else:
        hs = model.forward(embeds, mask, training=training)
        h_last = last_hidden(hs.h, mask)
    cache = hs.cache
    if not cfg.backprop_through_loop:
        cache, h_last, embeds = cache.detach(), h_last.detach(), embeds.detach()
    new_state = ReasoningState(embeds, mask, cache, h_last, state.e_m, state.k + 1)
    return new_state, thought


AUX_MODES = ("graph", "value", "off")


def run_reasoning(model, batch: InterleavedBatch, cfg: ReasoningConfig, answers: AnswerTargets = None,
                  aux="graph", training=False):
    """Initial forward, last-hidden extraction, then ``cfg.n_thoughts`` steps.

    With ``answers`` the final loss (answer cross-entropy after the last
    thought) is always computed. ``aux`` controls the intermediate losses
    after thoughts 1..N_t-1: ``"graph"`` records them for backprop,
    ``"value"`` only evaluates them, ``"off"`` skips them. Intermediate
    passes run without dropout so they never consume the dropout stream.
    """
    if aux not in AUX_MODES:
        raise ContractError(f"aux must be one of {AUX_MODES}, got {aux!r}")
    state = initial_state(model, batch, training=training)
    trace = ReasoningTrace(initial_h_l=_snapshot(state.h_last))
    for _ in range(cfg.n_thoughts):
        state, thought = reasoning_step(model, state, cfg, training=training)
        record = IterationRecord(
            k=state.k,
            h_l=_snapshot(state.h_last),
            h_t=_snapshot(thought.h_t).reshape(thought.h_t.shape[0], -1),
            h_t_pre_norm=None if thought.pre_norm is None else thought.pre_norm.astype(np.float64),
            attn_weights=thought.attn_weights,
        )
        last = state.k == cfg.n_thoughts
        if answers is not None and (last or aux != "off"):
            ctx = contextlib.nullcontext() if (aux == "graph" or last) else no_grad()
            with ctx:
                loss = answer_loss(model, state, answers, training=training and last)
            if aux != "off":
                record.aux_loss = float(loss.data)
                trace.aux_tensors.append(loss)
            if last:
                trace.final_tensor = loss
        trace.records.append(record)
    if answers is not None and cfg.n_thoughts == 0:
        trace.final_tensor = answer_loss(model, state, answers, training=training)
    return state, trace


def total_loss(model, state, answers: AnswerTargets, trace: ReasoningTrace, mu):
    """Compose ``mu * sum(aux) + final``; returns ``(total_tensor, breakdown)``.

    The auxiliary loss after the last thought is the same quantity as the
    final loss, so with ``mu > 0`` that term carries weight ``1 + mu``.
    """
    if answers is None or answers.targets.size == 0:
        raise ContractError("total_loss needs non-empty answer targets")
    if mu < 0:
        raise ContractError(f"mu must be >= 0, got {mu}")
    final = trace.final_tensor if trace.final_tensor is not None else answer_loss(model, state, answers)
    aux_values = [r.aux_loss for r in trace.records if r.aux_loss is not None]
    total = final
    if mu != 0 and len(trace.aux_tensors) < len(trace.records):
        raise ContractError("mu > 0 needs auxiliary losses; run the loop with aux='graph'")
    if mu != 0 and trace.aux_tensors:
        aux_sum = trace.aux_tensors[0]
        for t in trace.aux_tensors[1:]:
            aux_sum = aux_sum + t
        total = scale(aux_sum, mu) + final
    breakdown = LossBreakdown(aux=aux_values, final=float(final.data), mu=float(mu), total=float(total.data))
    trace.loss = breakdown
    return total, breakdown


def generate_answers(model, state: ReasoningState, gcfg):
    """Decode from a reasoning state (the step after the last thought)."""
    with no_grad():
        return model.generate_from(state.h_last, state.cache, state.mask, gcfg)


def reason_and_generate(model, batch, cfg: ReasoningConfig, gcfg):
    with no_grad():
        state, trace = run_reasoning(model, batch, cfg)
    return generate_answers(model, state, gcfg), trace
