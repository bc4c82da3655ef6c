"""Central finite-difference gradient checking."""

import numpy as np

from .tensor import no_grad


def numerical_gradient(fn, tensor, h=1e-5, indices=None):
    """Central differences of scalar ``fn()`` w.r.t. entries of ``tensor``.

    ``fn`` is re-evaluated with ``tensor.data`` perturbed in place. When
    ``indices`` (flat positions) is given, only those entries are probed and
    the rest of the returned array is NaN.
    """
    flat = tensor.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    positions = range(flat.size) if indices is None else indices
    with no_grad():
        for i in positions:
            orig = flat[i]
            flat[i] = orig + h
            plus = float(fn().data)
            flat[i] = orig - h
            minus = float(fn().data)
            flat[i] = orig
            out[i] = (plus - minus) / (2 * h)
    return out.reshape(tensor.shape)


def relative_error(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.linalg.norm(analytic - numeric)
    return float(diff / max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor))


def check_gradients(fn, tensors, h=1e-5, max_entries=None, rng=None):
    """Compare backprop gradients of ``fn()`` with finite differences.

    Returns ``{name: relative_error}``. ``tensors`` is a mapping of name to
    leaf tensor (all must have ``requires_grad`` set). With ``max_entries``,
    a random subset of each tensor's entries is probed.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors.values():
        t.zero_grad()
    loss = fn()
    loss.backward()
    errors = {}
    for name, t in tensors.items():
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        if max_entries is not None and t.size > max_entries:
            idx = rng.choice(t.size, size=max_entries, replace=False)
        else:
            idx = np.arange(t.size)
        numeric = numerical_gradient(fn, t, h=h, indices=idx)
        errors[name] = relative_error(analytic.reshape(-1)[idx], numeric.reshape(-1)[idx])
    return errors
