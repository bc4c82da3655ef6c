"""Toy vision-language model: patch encoder plus a decoder-only transformer.

Parameters live in one flat, ordered ``{name: Tensor}`` mapping so that the
optimizer and the checkpoint format can treat the model uniformly. The
decoder is pre-norm with learned absolute positions; its hidden states are
taken after the final layer norm (the vectors the output head reads).
"""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import functional as F
from .errors import CapacityError, ConfigError, ContractError, ShapeError
from .tensor import Tensor, concat, get_default_dtype, index_select, no_grad

logger = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    image_size: int = 16
    channels: int = 3
    patch_size: int = 4
    d_model: int = 64

    def __post_init__(self):
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        if self.d_model % 2:
            raise ConfigError(f"d_model must be even, got {self.d_model}")

    @property
    def n_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels


@dataclass
class DecoderConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    vocab_size: int = 256
    max_positions: int = 128
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass
class ModelConfig:
    """Encoder + decoder + latent-attention hyperparameters."""

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    latent_heads: int = 4
    init_std: float = 0.02

    def __post_init__(self):
        if self.init_std <= 0:
            raise ConfigError(f"init_std must be > 0, got {self.init_std}")
        if self.encoder.d_model != self.decoder.d_model:
            raise ConfigError("encoder and decoder d_model differ")
        if self.decoder.d_model % self.latent_heads:
            raise ConfigError(f"latent_heads {self.latent_heads} must divide d_model {self.decoder.d_model}")

    @property
    def d_model(self):
        return self.decoder.d_model

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(EncoderConfig(**d["encoder"]), DecoderConfig(**d["decoder"]), d["latent_heads"],
                   d.get("init_std", 0.02))


@dataclass
class GenerationConfig:
    temperature: float = 0.1
    max_new_tokens: int = 4
    seed: int = 0
    eos_id: int = 1

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")


@dataclass
class InterleavedBatch:
    """Visual-then-text embeddings, right-padded, with their attention mask."""

    embeds: Tensor
    mask: np.ndarray
    lengths: np.ndarray
    n_visual: int

    def __post_init__(self):
        check_right_padded(self.mask)

    @property
    def batch_size(self):
        return self.embeds.shape[0]

    @property
    def seq_len(self):
        return self.embeds.shape[1]

    @property
    def visual(self):
        """The visual slice of the batch (the multimodal context for attention)."""
        return self.embeds[:, : self.n_visual]


@dataclass
class KVCache:
    layers: list
    length: int

    def detach(self):
        return KVCache([(k.detach(), v.detach()) for k, v in self.layers], self.length)


@dataclass
class HiddenStates:
    h: Tensor
    cache: KVCache


def check_right_padded(mask):
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be B x S, got shape {mask.shape}")
    lengths = mask.sum(axis=1)
    if np.any(lengths < 1):
        raise ContractError("every mask row needs at least one real position")
    expected = np.arange(mask.shape[1])[None, :] < lengths[:, None]
    if not np.array_equal(mask > 0, expected):
        raise ContractError("mask is not right-padded (all 1s must precede all 0s)")
    return lengths


def last_index(mask):
    """Index of the last 1 in each mask row (the last non-padded position)."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be B x S, got shape {mask.shape}")
    nonzero = mask > 0
    if not np.all(nonzero.any(axis=1)):
        raise ContractError("last_hidden: a mask row has no real positions")
    return mask.shape[1] - 1 - np.argmax(nonzero[:, ::-1], axis=1)


def last_hidden(h, mask):
    """Gather ``h[b, last_index(mask)[b]]`` for each row: B x S x D -> B x D.

    For a right-padded mask this is ``sum(mask_row) - 1``; after thoughts
    have been appended behind the padding it is the final column.
    """
    idx = last_index(mask)
    if h.shape[:2] != np.asarray(mask).shape:
        raise ShapeError(f"hidden states {h.shape} do not match mask {np.asarray(mask).shape}")
    return index_select(h, (np.arange(h.shape[0]), idx))


def _normal(rng, shape, std, dtype):
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, dtype=dtype)


def init_params(cfg: ModelConfig, seed=0):
    """Scaled-normal init (std ``cfg.init_std``, default 0.02; residual output maps / sqrt(2 * layers))."""
    rng = np.random.default_rng(seed)
    dtype = get_default_dtype()
    enc, dec = cfg.encoder, cfg.decoder
    D = dec.d_model
    std = cfg.init_std
    resid_std = std / math.sqrt(2 * dec.n_layers)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True, dtype=dtype)

    p = OrderedDict()
    p["encoder.patch_proj.weight"] = _normal(rng, (enc.patch_dim, D), std, dtype)
    p["encoder.patch_proj.bias"] = zeros(D)
    p["encoder.pos"] = _normal(rng, (enc.n_patches, D), std, dtype)
    p["decoder.tok_emb"] = _normal(rng, (dec.vocab_size, D), std, dtype)
    p["decoder.pos_emb"] = _normal(rng, (dec.max_positions, D), std, dtype)
    for i in range(dec.n_layers):
        pre = f"decoder.blocks.{i}."
        p[pre + "ln1.gain"] = ones(D)
        p[pre + "ln1.bias"] = zeros(D)
        p[pre + "attn.wqkv"] = _normal(rng, (D, 3 * D), std, dtype)
        p[pre + "attn.bqkv"] = zeros(3 * D)
        p[pre + "attn.wo"] = _normal(rng, (D, D), resid_std, dtype)
        p[pre + "attn.bo"] = zeros(D)
        p[pre + "ln2.gain"] = ones(D)
        p[pre + "ln2.bias"] = zeros(D)
        p[pre + "mlp.w1"] = _normal(rng, (D, 4 * D), std, dtype)
        p[pre + "mlp.b1"] = zeros(4 * D)
        p[pre + "mlp.w2"] = _normal(rng, (4 * D, D), resid_std, dtype)
        p[pre + "mlp.b2"] = zeros(D)
    p["decoder.ln_f.gain"] = ones(D)
    p["decoder.ln_f.bias"] = zeros(D)
    p["decoder.head"] = _normal(rng, (D, dec.vocab_size), std, dtype)
    # multimodal latent attention (used by the Multi variant only)
    # fan-in scaling keeps the value path (wv, wo, proj_back) from shrinking e_m by ~(std * sqrt(D))^3
    lat_std = 1.0 / math.sqrt(D)
    p["latent.proj.weight"] = _normal(rng, (D, D), lat_std, dtype)
    p["latent.proj.bias"] = zeros(D)
    p["latent.attn.wk"] = _normal(rng, (D, D), lat_std, dtype)
    p["latent.attn.wv"] = _normal(rng, (D, D), lat_std, dtype)
    p["latent.attn.wo"] = _normal(rng, (D, D), lat_std, dtype)
    p["latent.proj_back.weight"] = _normal(rng, (D, D), lat_std, dtype)
    p["latent.proj_back.bias"] = zeros(D)
    p["latent.norm.gain"] = ones(D)
    p["latent.norm.bias"] = zeros(D)
    return p


class VisionLanguageModel:
    """Patch encoder and causal decoder sharing one parameter table."""

    def __init__(self, cfg: ModelConfig = None, seed=0, params=None):
        self.cfg = cfg or ModelConfig()
        self.params = params if params is not None else init_params(self.cfg, seed)
        self._dropout_rng = np.random.default_rng(seed + 1)

    def parameters(self):
        return self.params

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    @property
    def d_model(self):
        return self.cfg.d_model

    # ------------------------------------------------------------ encoder
    def encode_image(self, images):
        """Images (H x W x C or B x H x W x C, floats in [0, 1]) -> S_v x D.

        Each non-overlapping patch is flattened row-major, projected to D,
        and offset by a learned per-patch position embedding.
        """
        enc = self.cfg.encoder
        x = np.asarray(images)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != (enc.image_size, enc.image_size, enc.channels):
            raise ConfigError(
                f"image shape {x.shape[-3:]} does not match encoder "
                f"({enc.image_size}, {enc.image_size}, {enc.channels})"
            )
        B, P = x.shape[0], enc.patch_size
        n = enc.image_size // P
        patches = x.reshape(B, n, P, n, P, enc.channels).transpose(0, 1, 3, 2, 4, 5)
        patches = Tensor(patches.reshape(B, n * n, enc.patch_dim), dtype=get_default_dtype())
        out = F.linear(patches, self.params["encoder.patch_proj.weight"], self.params["encoder.patch_proj.bias"])
        out = out + self.params["encoder.pos"]
        return out[0] if single else out

    def embed_tokens(self, ids):
        return F.embedding(self.params["decoder.tok_emb"], ids)

    def interleave(self, e_v, token_seqs, pad_id=0, max_context=None):
        """Build ``[visual; text]`` rows, right-padded to the batch maximum.

        ``e_v`` is a B x S_v x D tensor (or a list of S_v x D tensors).
        Text that would overflow ``max_context`` is tail-truncated.
        """
        if isinstance(e_v, (list, tuple)):
            if not e_v:
                raise ContractError("interleave needs a non-empty batch")
            e_v = concat([v.reshape(1, *v.shape) for v in e_v], axis=0)
        B, S_v, _ = e_v.shape
        if B == 0 or len(token_seqs) != B:
            raise ContractError(f"interleave: {B} images but {len(token_seqs)} token sequences")
        max_context = max_context or self.cfg.decoder.max_positions
        room = max_context - S_v
        if room < 1:
            raise CapacityError(f"visual tokens ({S_v}) fill the context ({max_context})")
        seqs = []
        for i, ids in enumerate(token_seqs):
            ids = list(ids)
            if len(ids) > room:
                logger.warning("sample %d: text of %d tokens truncated to %d", i, len(ids), room)
                ids = ids[:room]
            seqs.append(ids)
        S_t = max(len(s) for s in seqs)
        ids = np.full((B, S_t), pad_id, dtype=np.int64)
        text_mask = np.zeros((B, S_t), dtype=np.int64)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s
            text_mask[i, : len(s)] = 1
        parts = [e_v]
        if S_t:
            parts.append(self.embed_tokens(ids))
        embeds = concat(parts, axis=1) if len(parts) > 1 else e_v
        mask = np.concatenate([np.ones((B, S_v), dtype=np.int64), text_mask], axis=1)
        return InterleavedBatch(embeds, mask, mask.sum(axis=1), S_v)

    # ------------------------------------------------------------ decoder
    def forward(self, embeds, mask, cache=None, training=False):
        """Causal decoder over ``embeds`` (B x S x D).

        ``mask`` covers every position seen so far (cached + new), so its
        width is ``cache.length + S``. Returns final-norm hidden states for
        the new positions and the extended cache.
        """
        dec = self.cfg.decoder
        p = self.params
        B, S, D = embeds.shape
        start = cache.length if cache is not None else 0
        T = start + S
        mask = np.asarray(mask)
        if mask.shape != (B, T):
            raise ShapeError(f"mask shape {mask.shape} != ({B}, {T})")
        if T > dec.max_positions:
            raise CapacityError(f"sequence length {T} exceeds max_positions {dec.max_positions}")
        H = dec.n_heads
        dh = D // H
        bias = F.attention_bias(mask, np.arange(start, T), T, embeds.dtype)
        x = embeds + p["decoder.pos_emb"][start:T]
        layers = []
        for i in range(dec.n_layers):
            pre = f"decoder.blocks.{i}."
            a = F.layer_norm(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"])
            qkv = F.linear(a, p[pre + "attn.wqkv"], p[pre + "attn.bqkv"])
            qkv = qkv.reshape(B, S, 3, H, dh).transpose(2, 0, 3, 1, 4)
            q, k, v = qkv[0], qkv[1], qkv[2]
            if cache is not None:
                k_old, v_old = cache.layers[i]
                k = concat([k_old, k], axis=2)
                v = concat([v_old, v], axis=2)
            layers.append((k, v))
            att, _ = F.scaled_dot_attention(q, k, v, bias)
            att = att.transpose(0, 2, 1, 3).reshape(B, S, D)
            x = x + F.dropout(F.linear(att, p[pre + "attn.wo"], p[pre + "attn.bo"]), dec.dropout, self._dropout_rng, training)
            m = F.layer_norm(x, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
            m = F.gelu(F.linear(m, p[pre + "mlp.w1"], p[pre + "mlp.b1"]))
            x = x + F.dropout(F.linear(m, p[pre + "mlp.w2"], p[pre + "mlp.b2"]), dec.dropout, self._dropout_rng, training)
        h = F.layer_norm(x, p["decoder.ln_f.gain"], p["decoder.ln_f.bias"])
        return HiddenStates(h, KVCache(layers, T))

    def logits(self, h):
        return F.linear(h, self.params["decoder.head"])

    # ------------------------------------------------------------ generation
    def generate(self, batch: InterleavedBatch, gcfg: GenerationConfig):
        """Sample answers for a batch without any latent reasoning."""
        with no_grad():
            hs = self.forward(batch.embeds, batch.mask)
            h_last = last_hidden(hs.h, batch.mask)
        return self.generate_from(h_last, hs.cache, batch.mask, gcfg)

    def generate_from(self, h_last, cache, mask, gcfg: GenerationConfig):
        """Autoregressive sampling from ``softmax(logits / temperature)``.

        Starts from the last hidden state of an already-encoded sequence.
        Returns one list of token ids per sample, without the end token.
        """
        if not gcfg.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {gcfg.temperature}")
        rng = np.random.default_rng(gcfg.seed)
        B = h_last.shape[0]
        outputs = [[] for _ in range(B)]
        done = np.zeros(B, dtype=bool)
        mask = np.asarray(mask)
        with no_grad():
            logits = self.logits(h_last).data
            for step in range(gcfg.max_new_tokens):
                tokens = sample_tokens(logits, gcfg.temperature, rng)
                for b in range(B):
                    if done[b]:
                        continue
                    if tokens[b] == gcfg.eos_id:
                        done[b] = True
                    else:
                        outputs[b].append(int(tokens[b]))
                if done.all() or step == gcfg.max_new_tokens - 1:
                    break
                mask = np.concatenate([mask, np.ones((B, 1), dtype=mask.dtype)], axis=1)
                hs = self.forward(self.embed_tokens(tokens[:, None]), mask, cache)
                cache = hs.cache
                logits = self.logits(hs.h[:, 0]).data
        return outputs


def sample_tokens(logits, temperature, rng):
    """Draw one token per row; computed in float64 by inverse CDF."""
    z = np.asarray(logits, dtype=np.float64) / temperature
    z -= z.max(axis=-1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=-1, keepdims=True)
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0])[:, None] * cdf[:, -1:]
    return np.minimum((cdf <= u).sum(axis=-1), probs.shape[-1] - 1).astype(np.int64)
