"""Fused differentiable primitives used by the model.

Each function computes its forward pass in numpy and records a hand-derived
backward rule, which keeps the graph short for the hot paths (attention,
normalization, the loss).
"""

import math
import warnings

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor, _record, as_tensor, matmul

IGNORE_INDEX = -100
_GELU_C = math.sqrt(2.0 / math.pi)


class EmptyTargetsWarning(UserWarning):
    """Every target position was ignored; the loss is defined as zero."""


def _softmax_np(x, axis):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis=-1):
    """Numerically stable softmax: the slice maximum is subtracted first."""
    if x.shape[axis] == 0:
        raise ShapeError(f"softmax over an empty axis {axis} of shape {x.shape}")
    y = _softmax_np(x.data, axis)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), backward, "softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then apply ``gain * xhat + bias``."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match D={x.shape[-1]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv_std * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            ggain = (g * xhat).sum(axis=lead)
        if bias.requires_grad:
            gbias = g.sum(axis=lead)
        return gx, ggain, gbias

    return _record(out, (x, gain, bias), backward, "layer_norm")


def gelu(x):
    """Tanh approximation of the Gaussian error linear unit."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * (v * v * v))
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner),)

    return _record(out, (x,), backward, "gelu")


def linear(x, weight, bias=None):
    y = matmul(x, weight)
    return y if bias is None else y + bias


def embedding(table, ids):
    """Gather rows of ``table`` (V x D) for integer ``ids`` of any shape."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError(f"embedding ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _record(out, (table,), backward, "embedding")


def cross_entropy(logits, targets, ignore_id=IGNORE_INDEX):
    """Mean negative log-likelihood over the non-ignored target positions.

    The returned scalar is float64 whatever the logits dtype, so losses can be
    composed without float32 rounding.
    """
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {logits.shape} and targets {targets.shape} disagree")
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    tgt = targets.reshape(-1)
    valid = tgt != ignore_id
    if np.any(valid & ((tgt < 0) | (tgt >= V))):
        raise ContractError(f"target ids must lie in [0, {V}) or equal ignore_id={ignore_id}")
    n_valid = int(valid.sum())
    if n_valid == 0:
        warnings.warn("cross_entropy: all targets ignored, loss defined as 0", EmptyTargetsWarning)

        def backward_empty(g):
            return (np.zeros_like(logits.data),)

        return _record(np.zeros((), dtype=np.float64), (logits,), backward_empty, "cross_entropy")

    rows = np.nonzero(valid)[0]
    picked = flat[rows].astype(np.float64)
    shifted = picked - picked.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    nll = log_z - shifted[np.arange(n_valid), tgt[rows]]
    loss = np.asarray(nll.mean(), dtype=np.float64)

    def backward(g):
        probs = np.exp(shifted - log_z[:, None])
        probs[np.arange(n_valid), tgt[rows]] -= 1.0
        full = np.zeros(flat.shape, dtype=np.float64)
        full[rows] = probs * (float(g) / n_valid)
        return (full.reshape(logits.shape).astype(logits.dtype),)

    return _record(loss, (logits,), backward, "cross_entropy")


def dropout(x, p, rng, training=True):
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _record(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def attention_bias(mask_keys, q_positions, k_len, dtype):
    """Additive bias for causal attention over non-padded keys.

    ``mask_keys`` is B x k_len (1 = real position), ``q_positions`` the
    absolute index of each query. Returns B x 1 x len(q) x k_len.
    """
    mask_keys = np.asarray(mask_keys)
    k_idx = np.arange(k_len)
    causal = k_idx[None, :] <= np.asarray(q_positions)[:, None]
    allowed = causal[None, :, :] & (mask_keys[:, None, :] > 0)
    return np.where(allowed, 0.0, -1e9).astype(dtype)[:, None, :, :]


def scaled_dot_attention(q, k, v, bias=None):
    """Multi-head attention core on B x H x S x dh operands.

    Returns the attended values and the softmax weights tensor.
    """
    dh = q.shape[-1]
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    if bias is not None:
        scores = scores + as_tensor(bias, like=scores)
    weights = softmax(scores, axis=-1)
    return matmul(weights, v), weights


__all__ = [
    "IGNORE_INDEX",
    "EmptyTargetsWarning",
    "Tensor",
    "attention_bias",
    "cross_entropy",
    "dropout",
    "embedding",
    "gelu",
    "layer_norm",
    "linear",
    "scaled_dot_attention",
    "softmax",
]
