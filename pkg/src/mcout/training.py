"""Optimizer, learning-rate schedule, training loop and evaluation."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, load_params_into, params_to_arrays, save_checkpoint
from .config import DEVIATIONS, RunConfig
from .data import Tokenizer, images_as_floats, load_jsonl
from .errors import ContractError, ConfigError, NumericalAbort
from .metrics import accuracy, corpus_bleu
from .model import ModelConfig, VisionLanguageModel
from .reasoning import AnswerTargets, generate_answers, run_reasoning, total_loss
from .tensor import default_dtype, no_grad

logger = logging.getLogger(__name__)


# ------------------------------------------------------------------ schedule
@dataclass
class LRSchedule:
    warmup_lr: float
    init_lr: float
    min_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.min_lr > self.init_lr:
            raise ConfigError("min_lr must not exceed init_lr")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError(f"need 0 <= warmup_steps ({self.warmup_steps}) < total_steps ({self.total_steps})")


def lr_at(step, s: LRSchedule):
    """Linear warmup from ``warmup_lr`` to ``init_lr``, then cosine to ``min_lr``."""
    if not 0 <= step <= s.total_steps:
        raise ContractError(f"step {step} outside [0, {s.total_steps}]")
    if step < s.warmup_steps:
        return s.warmup_lr + (s.init_lr - s.warmup_lr) * step / s.warmup_steps
    progress = (step - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    return s.min_lr + 0.5 * (s.init_lr - s.min_lr) * (1.0 + math.cos(math.pi * progress))


# ----------------------------------------------------------------- optimizer
class AdamW:
    """Adam with decoupled weight decay.

    Decay applies to matrices only (biases, gains and other 1-D tensors are
    exempt). Parameters whose ``grad`` is ``None`` are skipped entirely.
    """

    def __init__(self, params, weight_decay=0.05, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = OrderedDict((n, np.zeros_like(p.data)) for n, p in params.items())
        self.v = OrderedDict((n, np.zeros_like(p.data)) for n, p in params.items())
        self.step_count = 0

    def step(self, lr):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if p.data.ndim >= 2 and self.weight_decay:
                p.data -= p.data.dtype.type(lr * self.weight_decay) * p.data
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (lr * update).astype(p.data.dtype)

    def state_arrays(self):
        out = OrderedDict()
        for n in self.params:
            out[f"optim.m.{n}"] = self.m[n].copy()
            out[f"optim.v.{n}"] = self.v[n].copy()
        return out

    def load_state_arrays(self, tensors, step_count):
        for n in self.params:
            self.m[n] = np.array(tensors[f"optim.m.{n}"], dtype=self.params[n].dtype, copy=True)
            self.v[n] = np.array(tensors[f"optim.v.{n}"], dtype=self.params[n].dtype, copy=True)
        self.step_count = int(step_count)


def clip_grad_norm(params, max_norm):
    grads = [p.grad for p in params.values() if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if max_norm and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(factor)
    return total


# ------------------------------------------------------------------ batching
@dataclass
class EncodedSample:
    image: np.ndarray
    question: list
    answer: list
    answer_text: str


def encode_samples(samples, tokenizer: Tokenizer):
    images = images_as_floats(samples) if samples else []
    return [
        EncodedSample(images[i], tokenizer.encode(s.question), tokenizer.encode(s.answer), s.answer)
        for i, s in enumerate(samples)
    ]


def build_batch(model, encoded, tokenizer: Tokenizer):
    e_v = model.encode_image(np.stack([e.image for e in encoded]))
    return model.interleave(e_v, [e.question for e in encoded], pad_id=tokenizer.pad_id)


def build_answers(encoded, tokenizer: Tokenizer):
    return AnswerTargets.from_sequences([e.answer for e in encoded], tokenizer.eos_id, tokenizer.pad_id)


# ---------------------------------------------------------------- train step
def train_step(model, opt: AdamW, encoded, cfg: RunConfig, lr, tokenizer: Tokenizer, step=0):
    """One update on ``encoded``; returns the :class:`LossBreakdown`."""
    model._dropout_rng = np.random.default_rng([cfg.seed, 7, step])
    model.zero_grad()
    rcfg = cfg.reasoning_config()
    batch = build_batch(model, encoded, tokenizer)
    answers = build_answers(encoded, tokenizer)
    if cfg.objective == "final":
        aux, mu = "off", 0.0
    else:
        aux, mu = ("graph" if cfg.mu != 0 else "value"), cfg.mu
    state, trace = run_reasoning(model, batch, rcfg, answers, aux=aux, training=True)
    total, breakdown = total_loss(model, state, answers, trace, mu)
    breakdown.mu = cfg.mu if cfg.objective == "total" else 0.0
    if not np.isfinite(breakdown.total):
        total.backward()
        norms = {n: float(np.linalg.norm(p.grad)) for n, p in model.params.items() if p.grad is not None}
        raise NumericalAbort(
            f"non-finite loss at step {step}",
            {"step": step, "lr": lr, "loss": breakdown.to_dict(), "grad_norms": norms},
        )
    total.backward()
    clip_grad_norm(model.params, cfg.grad_clip)
    opt.step(lr)
    return breakdown


# -------------------------------------------------------------- checkpoints
def make_checkpoint(model, opt, cfg: RunConfig, step):
    tensors = params_to_arrays(model.params)
    if opt is not None:
        tensors.update(opt.state_arrays())
    config = {"run": cfg.to_dict(), "model": model.cfg.to_dict(), "optimizer_steps": opt.step_count if opt else 0}
    return Checkpoint(tensors, config, step)


def load_model(path_or_ckpt):
    """Rebuild ``(model, run_config, checkpoint)`` from a checkpoint."""
    ckpt = load_checkpoint(path_or_ckpt) if isinstance(path_or_ckpt, (str, os.PathLike)) else path_or_ckpt
    try:
        cfg = RunConfig.from_dict(ckpt.config["run"])
        mcfg = ModelConfig.from_dict(ckpt.config["model"])
    except KeyError as exc:
        raise ConfigError(f"checkpoint config lacks {exc}") from None
    dtype = next(iter(ckpt.tensors.values())).dtype if ckpt.tensors else np.float32
    with default_dtype(dtype):
        model = VisionLanguageModel(mcfg, seed=0)
    load_params_into(model.params, ckpt.tensors, prefix_filter=lambda n: not n.startswith("optim."))
    return model, cfg, ckpt


# ------------------------------------------------------------------ training
@dataclass
class Phase:
    name: str
    samples: list
    steps: int
    steps_per_epoch: int
    offset: int


@dataclass
class TrainingResult:
    model: VisionLanguageModel
    optimizer: AdamW
    log: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    total_steps: int = 0


def _phases(cfg, train_samples, pretrain_samples):
    phases, offset = [], 0
    if pretrain_samples and cfg.pretrain_steps:
        spe = math.ceil(len(pretrain_samples) / cfg.batch_size)
        phases.append(Phase("pretrain", pretrain_samples, cfg.pretrain_steps, spe, offset))
        offset += cfg.pretrain_steps
    if not train_samples:
        raise ContractError("training set is empty")
    spe = math.ceil(len(train_samples) / cfg.batch_size)
    steps = cfg.steps or cfg.epochs * spe
    phases.append(Phase("train", train_samples, steps, spe, offset))
    return phases


def _batch_indices(cfg, phase_id, n, spe, local_step):
    epoch, pos = divmod(local_step, spe)
    perm = np.random.default_rng([cfg.seed, phase_id, epoch]).permutation(n)
    return epoch, perm[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_training(cfg: RunConfig, out_dir=None, resume=None, train_samples=None, pretrain_samples=None,
                 progress=None):
    """Train per ``cfg``; returns a :class:`TrainingResult`.

    Writes ``metrics.jsonl`` (one deterministic line per step),
    ``timing.jsonl`` (wall-clock per step), ``run.json`` and checkpoints at
    every epoch end plus ``final.bin`` when ``out_dir`` is given.
    """
    tokenizer = Tokenizer()
    if cfg.vocab_size < len(tokenizer):
        raise ConfigError(f"vocab_size {cfg.vocab_size} smaller than tokenizer vocabulary {len(tokenizer)}")
    if train_samples is None:
        if not cfg.train_data:
            raise ConfigError("train_data is not set")
        train_samples = load_jsonl(cfg.train_data)
    if pretrain_samples is None and cfg.pretrain_data and cfg.pretrain_steps:
        pretrain_samples = load_jsonl(cfg.pretrain_data)
    phases = _phases(cfg, encode_samples(train_samples, tokenizer),
                     encode_samples(pretrain_samples, tokenizer) if pretrain_samples else None)
    total_steps = sum(p.steps for p in phases)
    schedule = LRSchedule(cfg.warmup_lr, cfg.init_lr, cfg.min_lr, min(cfg.warmup_steps, total_steps - 1), total_steps)

    model = VisionLanguageModel(cfg.model_config(), seed=cfg.seed)
    opt = AdamW(model.params, cfg.weight_decay, (cfg.beta1, cfg.beta2), cfg.adam_eps)
    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume) if isinstance(resume, (str, os.PathLike)) else resume
        load_params_into(model.params, ckpt.tensors, prefix_filter=lambda n: not n.startswith("optim."))
        opt.load_state_arrays(ckpt.tensors, ckpt.config.get("optimizer_steps", ckpt.step))
        start = int(ckpt.step)

    result = TrainingResult(model, opt, total_steps=total_steps)
    metrics_fh = timing_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        _write_json(os.path.join(out_dir, "run.json"), {
            "config": cfg.to_dict(),
            "config_hash": cfg.config_hash(),
            "total_steps": total_steps,
            "deviations": list(DEVIATIONS),
        })
        with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
            fh.write(cfg.to_text())
        metrics_path = os.path.join(out_dir, "metrics.jsonl")
        kept = []
        if start and os.path.exists(metrics_path):
            with open(metrics_path, encoding="utf-8") as fh:
                kept = [ln for ln in fh if ln.strip() and json.loads(ln)["step"] < start]
        metrics_fh = open(metrics_path, "w", encoding="utf-8")
        metrics_fh.writelines(kept)
        timing_fh = open(os.path.join(out_dir, "timing.jsonl"), "a" if start else "w", encoding="utf-8")

    t0 = time.perf_counter()
    try:
        for phase_id, phase in enumerate(phases):
            for local in range(phase.steps):
                step = phase.offset + local
                if step < start:
                    continue
                epoch, idx = _batch_indices(cfg, phase_id, len(phase.samples), phase.steps_per_epoch, local)
                lr = lr_at(step, schedule)
                try:
                    bd = train_step(model, opt, [phase.samples[i] for i in idx], cfg, lr, tokenizer, step)
                except NumericalAbort as exc:
                    if out_dir is not None:
                        _write_json(os.path.join(out_dir, "abort.json"), exc.diagnostics)
                    raise
                entry = {"step": step, "phase": phase.name, "epoch": epoch, "lr": lr, "total": bd.total,
                         "final": bd.final, "aux": bd.aux, "mu": bd.mu}
                result.log.append(entry)
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(entry) + "\n")
                    timing_fh.write(json.dumps({"step": step, "wallclock": time.perf_counter() - t0}) + "\n")
                if progress is not None:
                    progress(entry)
                epoch_end = (local + 1) % phase.steps_per_epoch == 0
                if out_dir is not None and epoch_end:
                    path = os.path.join(out_dir, f"ckpt_{phase.name}_epoch{epoch}.bin")
                    save_checkpoint(path, make_checkpoint(model, opt, cfg, step + 1))
                    result.checkpoints.append(path)
        if out_dir is not None:
            path = os.path.join(out_dir, "final.bin")
            save_checkpoint(path, make_checkpoint(model, opt, cfg, total_steps))
            result.checkpoints.append(path)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
            timing_fh.close()
    return result


# ---------------------------------------------------------------- evaluation
def predict(model, samples, cfg: RunConfig, tokenizer=None, return_traces=False):
    """Generate answer strings for ``samples`` (reasoning loop included)."""
    tokenizer = tokenizer or Tokenizer()
    encoded = encode_samples(samples, tokenizer)
    rcfg = cfg.reasoning_config()
    preds, traces = [], []
    bs = cfg.eval_batch_size
    with no_grad():
        for bi, lo in enumerate(range(0, len(encoded), bs)):
            chunk = encoded[lo:lo + bs]
            batch = build_batch(model, chunk, tokenizer)
            state, trace = run_reasoning(model, batch, rcfg)
            gcfg = cfg.generation_config(tokenizer.eos_id)
            gcfg.seed = cfg.eval_seed + bi
            for ids in generate_answers(model, state, gcfg):
                preds.append(tokenizer.decode(ids))
            traces.append(trace)
    return (preds, traces) if return_traces else preds


def eval_loss(model, samples, cfg: RunConfig, tokenizer=None):
    """Mean final answer loss over ``samples`` (no parameter update)."""
    tokenizer = tokenizer or Tokenizer()
    encoded = encode_samples(samples, tokenizer)
    rcfg = cfg.reasoning_config()
    losses = []
    with no_grad():
        for lo in range(0, len(encoded), cfg.eval_batch_size):
            chunk = encoded[lo:lo + cfg.eval_batch_size]
            batch = build_batch(model, chunk, tokenizer)
            answers = build_answers(chunk, tokenizer)
            _, trace = run_reasoning(model, batch, rcfg, answers, aux="off")
            losses.append(float(trace.final_tensor.data) * len(chunk))
    return sum(losses) / len(encoded)


def evaluate(model, samples, cfg: RunConfig, mode=None, tokenizer=None):
    """Accuracy and corpus BLEU of generated answers.

    The BLEU order is 4, capped at the longest reference so that one-word
    answers are scored on unigrams instead of collapsing to the smoothing
    floor.
    """
    mode = mode or cfg.eval_mode
    if not samples:
        raise ContractError("evaluate: no samples")
    preds = predict(model, samples, cfg, tokenizer)
    golds = [s.answer for s in samples]
    order = max(1, min(4, max(len(g.split()) for g in golds)))
    return {
        "accuracy": accuracy(preds, golds, mode),
        "bleu": corpus_bleu(preds, [[g] for g in golds], max_n=order),
        "n_samples": len(samples),
        "config_hash": cfg.config_hash(),
    }
