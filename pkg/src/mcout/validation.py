"""Input validation helpers shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np

from .data import SyntheticSample
from .errors import ContractError, ShapeError


def check_samples(X, y=None, allow_empty=False):
    """Coerce ``X`` to a list of :class:`SyntheticSample`.

    ``X`` may hold samples or their JSON records. When ``y`` is given it
    replaces the stored answers (one string per sample).
    """
    if isinstance(X, SyntheticSample):
        X = [X]
    try:
        items = list(X)
    except TypeError:
        raise ContractError(f"expected a sequence of samples, got {type(X).__name__}") from None
    samples = []
    for i, item in enumerate(items):
        if isinstance(item, SyntheticSample):
            samples.append(item)
        elif isinstance(item, dict):
            try:
                samples.append(SyntheticSample.from_record(item))
            except (KeyError, ValueError) as exc:
                raise ContractError(f"sample {i}: malformed record ({exc})") from exc
        else:
            raise ContractError(f"sample {i}: expected SyntheticSample or dict, got {type(item).__name__}")
    if not samples and not allow_empty:
        raise ContractError("no samples given")
    for s in samples:
        check_image(s.image, name=f"sample {s.id!r} image")
    if y is not None:
        y = [str(a) for a in check_1d(y, len(samples), "y")]
        samples = [SyntheticSample(s.id, s.image, s.question, a, s.meta, s.choices) for s, a in zip(samples, y)]
    return samples


def check_image(img, size=None, channels=3, name="image"):
    """An H x W x C uint8 image (or floats in [0, 1])."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[-1] != channels:
        raise ShapeError(f"{name}: expected H x W x {channels}, got shape {img.shape}")
    if size is not None and img.shape[:2] != (size, size):
        raise ShapeError(f"{name}: expected {size}x{size}, got {img.shape[:2]}")
    if img.dtype == np.uint8:
        return img
    if not np.issubdtype(img.dtype, np.floating):
        raise ContractError(f"{name}: dtype must be uint8 or float, got {img.dtype}")
    if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
        raise ContractError(f"{name}: float images must lie in [0, 1]")
    return img


def check_images(images, size=None, channels=3):
    """A batch B x H x W x C as a float array in [0, 1]."""
    arr = np.asarray(images)
    if arr.ndim != 4:
        raise ShapeError(f"expected B x H x W x C images, got shape {arr.shape}")
    for b in range(arr.shape[0]):
        check_image(arr[b], size, channels, name=f"image {b}")
    return arr.astype(np.float64) / 255.0 if arr.dtype == np.uint8 else arr


def check_1d(values, n=None, name="values"):
    values = list(values) if not isinstance(values, np.ndarray) else values.tolist()
    if n is not None and len(values) != n:
        raise ShapeError(f"{name}: expected {n} entries, got {len(values)}")
    return values
