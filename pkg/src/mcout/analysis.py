"""Per-iteration statistics of last hidden states and thought vectors.

Rows are produced for iteration ``k = 0..N_t``: ``hl_*`` describe the last
hidden state after ``k`` thoughts, ``ht_*`` the thought appended at step
``k`` (absent for ``k = 0``), and ``ht_pre_*`` the Multi thought before its
final layer norm. All statistics are float64.
"""

from __future__ import annotations

import csv
import logging
import math

import numpy as np

from .data import Tokenizer
from .reasoning import ReasoningConfig, Variant, run_reasoning
from .tensor import no_grad
from .training import build_answers, build_batch, encode_samples

logger = logging.getLogger(__name__)

TRACE_COLUMNS = [
    "sample_id", "k",
    "hl_mean", "hl_std", "hl_norm",
    "ht_mean", "ht_std", "ht_norm",
    "ht_pre_mean", "ht_pre_std", "ht_pre_norm",
    "aux_loss",
]
STAT_COLUMNS = [
    "k", "n_samples",
    "hl_mean", "hl_std", "hl_norm",
    "ht_mean", "ht_std", "ht_norm",
    "ht_pre_mean", "ht_pre_std", "ht_pre_norm",
    "aux_loss",
]
_GROUPS = ("hl", "ht", "ht_pre")


def vector_stats(x):
    """``(mean, std, mean L2 norm)`` of a stack of vectors (rows)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    # a constant stack has std exactly 0; the two-pass formula can leave ~1e-16
    std = 0.0 if x.size and np.all(x == x.flat[0]) else float(x.std())
    return float(x.mean()), std, float(np.linalg.norm(x, axis=-1).mean())


def _stat_fields(prefix, x):
    if x is None:
        return {f"{prefix}_mean": None, f"{prefix}_std": None, f"{prefix}_norm": None}
    mean, std, norm = vector_stats(x)
    return {f"{prefix}_mean": mean, f"{prefix}_std": std, f"{prefix}_norm": norm}


def trace_rows(trace, sample_ids):
    """Flatten a batched :class:`ReasoningTrace` into one row per (sample, k)."""
    rows = []
    if not trace.records:
        return rows
    for b, sid in enumerate(sample_ids):
        row = {"sample_id": sid, "k": 0, "aux_loss": None}
        row.update(_stat_fields("hl", trace.initial_h_l[b]))
        row.update(_stat_fields("ht", None))
        row.update(_stat_fields("ht_pre", None))
        rows.append(row)
        for rec in trace.records:
            row = {"sample_id": sid, "k": rec.k, "aux_loss": rec.aux_loss}
            row.update(_stat_fields("hl", rec.h_l[b]))
            row.update(_stat_fields("ht", rec.h_t[b]))
            row.update(_stat_fields("ht_pre", None if rec.h_t_pre_norm is None else rec.h_t_pre_norm[b]))
            rows.append(row)
    return rows


def aggregate(vectors_by_k, aux_by_k=None):
    """Aggregate per-iteration statistics across samples.

    ``vectors_by_k`` maps ``k`` to ``{"hl": array n x D, "ht": ..., "ht_pre": ...}``
    (missing groups allowed). Means and stds pool every element of every
    sample; norms average the per-sample L2 norms.
    """
    out = []
    for k in sorted(vectors_by_k):
        groups = vectors_by_k[k]
        n = len(groups["hl"])
        row = {"k": k, "n_samples": n}
        for g in _GROUPS:
            row.update(_stat_fields(g, groups.get(g)))
        aux = (aux_by_k or {}).get(k)
        row["aux_loss"] = None if not aux else float(np.mean(aux))
        out.append(row)
    return out


def analyze_latents(model, samples, n_thoughts, variant, cfg=None, n_samples=100):
    """Run the reasoning loop on up to ``n_samples`` samples and collect statistics.

    Returns ``(aggregate_rows, per_sample_rows)``. Each sample runs on its own
    so ``aux_loss`` is that sample's answer loss after ``k`` thoughts.
    """
    if n_thoughts == 0:
        logger.warning("analyze_latents: N_t = 0, nothing to analyze")
        return [], []
    tokenizer = Tokenizer()
    rcfg = ReasoningConfig(n_thoughts=n_thoughts, variant=Variant.parse(variant),
                           use_cache=True if cfg is None else cfg.use_cache)
    chosen = samples[:n_samples]
    encoded = encode_samples(chosen, tokenizer)
    per_sample = []
    by_k, aux_by_k = {}, {}
    with no_grad():
        for sample, enc in zip(chosen, encoded):
            batch = build_batch(model, [enc], tokenizer)
            answers = build_answers([enc], tokenizer)
            _, trace = run_reasoning(model, batch, rcfg, answers, aux="value")
            per_sample.extend(trace_rows(trace, [sample.id]))
            by_k.setdefault(0, {"hl": []})["hl"].append(trace.initial_h_l[0])
            for rec in trace.records:
                g = by_k.setdefault(rec.k, {"hl": [], "ht": [], "ht_pre": []})
                g["hl"].append(rec.h_l[0])
                g["ht"].append(rec.h_t[0])
                if rec.h_t_pre_norm is not None:
                    g["ht_pre"].append(rec.h_t_pre_norm[0])
                aux_by_k.setdefault(rec.k, []).append(rec.aux_loss)
    vectors = {
        k: {name: (np.stack(v) if len(v) else None) for name, v in groups.items()}
        for k, groups in by_k.items()
    }
    return aggregate(vectors, aux_by_k), per_sample


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)


def write_csv(path, rows, columns):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
