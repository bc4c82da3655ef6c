"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"MCOUT1"                      magic, 6 bytes
    u32 version                    currently 1
    u32 tensor count
    per tensor:
        u16 name length, UTF-8 name
        u8  dtype code             0 = float32, 1 = float64
        u8  rank
        u64 * rank                 dims
        payload                    little-endian IEEE-754, row-major
    UTF-8 JSON blob                to end of file

The JSON blob holds the configs, the training step and a manifest of tensor
names/shapes that is cross-checked on load.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointFormatError, ContractError, MCOUTError

MAGIC = b"MCOUT1"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
MAX_RANK = 8


class CheckpointTruncatedError(CheckpointFormatError, OSError):
    """The file ended before a declared field or payload."""


@dataclass
class Checkpoint:
    tensors: OrderedDict
    config: dict = field(default_factory=dict)
    step: int = 0


def _dumps_config(ckpt):
    blob = {
        "config": ckpt.config,
        "step": int(ckpt.step),
        "manifest": [[name, list(arr.shape), arr.dtype.name] for name, arr in ckpt.tensors.items()],
    }
    return json.dumps(blob, sort_keys=True, separators=(",", ":")).encode("utf-8")


def to_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise ContractError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ContractError(f"tensor name too long: {name[:40]}...")
        code = _CODES[arr.dtype]
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    parts.append(_dumps_config(ckpt))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"checkpoint truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointFormatError("bad magic: not an MCOUT checkpoint")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    tensors = OrderedDict()
    for i in range(count):
        (n,) = r.unpack("<H", f"name length of tensor {i}")
        try:
            name = r.take(n, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"tensor {i}: name is not UTF-8") from exc
        code, rank = r.unpack("<BB", f"dtype/rank of {name!r}")
        if code not in _DTYPES:
            raise CheckpointFormatError(f"tensor {name!r}: unknown dtype code {code}")
        if rank > MAX_RANK:
            raise CheckpointFormatError(f"tensor {name!r}: rank {rank} exceeds {MAX_RANK}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name!r}")
        dtype = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=object)) * dtype.itemsize
        if nbytes > len(buf) - r.pos:
            raise CheckpointTruncatedError(f"tensor {name!r}: payload of {nbytes} bytes runs past end of file")
        arr = np.frombuffer(r.take(nbytes, f"payload of {name!r}"), dtype=dtype).reshape(dims)
        tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    try:
        blob = json.loads(buf[r.pos:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointTruncatedError("config blob missing or unreadable (truncated file?)") from exc
    manifest = [[name, list(arr.shape), arr.dtype.name] for name, arr in tensors.items()]
    if blob.get("manifest") != manifest:
        raise CheckpointFormatError("tensor headers disagree with the stored manifest")
    return Checkpoint(tensors, blob.get("config", {}), blob.get("step", 0))


def save_checkpoint(path, ckpt: Checkpoint):
    data = to_bytes(ckpt)
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def params_to_arrays(params):
    return OrderedDict((name, np.array(t.data, copy=True)) for name, t in params.items())


def load_params_into(params, tensors, prefix_filter=None):
    """Copy checkpoint arrays into an existing parameter table.

    Every model parameter must be present, and any name the model does not
    know is rejected.
    """
    names = [n for n in tensors if prefix_filter is None or prefix_filter(n)]
    unknown = sorted(set(names) - set(params))
    missing = sorted(set(params) - set(names))
    if unknown:
        raise CheckpointFormatError(f"unknown parameter names in checkpoint: {unknown[:5]}")
    if missing:
        raise CheckpointFormatError(f"checkpoint lacks parameters: {missing[:5]}")
    for name in names:
        target = params[name]
        if target.shape != tensors[name].shape:
            raise CheckpointFormatError(f"{name}: shape {tensors[name].shape} != model {target.shape}")
        target.data = np.array(tensors[name], dtype=target.dtype, copy=True)


__all__ = [
    "Checkpoint",
    "CheckpointFormatError",
    "CheckpointTruncatedError",
    "MCOUTError",
    "from_bytes",
    "load_checkpoint",
    "load_params_into",
    "params_to_arrays",
    "save_checkpoint",
    "to_bytes",
]
