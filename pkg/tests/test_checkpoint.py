import struct
from collections import OrderedDict

import numpy as np
import pytest

from conftest import quick_config
from mcout.checkpoint import (
    MAGIC, Checkpoint, CheckpointFormatError, CheckpointTruncatedError, from_bytes, load_checkpoint,
    load_params_into, save_checkpoint, to_bytes,
)
from mcout.errors import ContractError
from mcout.tensor import Tensor
from mcout.training import eval_loss, load_model, run_training


def sample_ckpt():
    rng = np.random.default_rng(0)
    tensors = OrderedDict([
        ("a.weight", rng.normal(size=(3, 4)).astype(np.float32)),
        ("b", rng.normal(size=(5,))),
        ("scalar", np.array(2.5, dtype=np.float32)),
        ("empty", np.zeros((0, 3), dtype=np.float32)),
    ])
    return Checkpoint(tensors, {"run": {"seed": 1}, "note": "x"}, step=7)


def test_round_trip_bit_exact(tmp_path):
    ckpt = sample_ckpt()
    p1, p2 = tmp_path / "1.bin", tmp_path / "2.bin"
    save_checkpoint(p1, ckpt)
    back = load_checkpoint(p1)
    save_checkpoint(p2, back)
    assert p1.read_bytes() == p2.read_bytes()
    assert back.step == 7 and back.config == ckpt.config
    for name, arr in ckpt.tensors.items():
        assert back.tensors[name].dtype == arr.dtype
        assert back.tensors[name].tobytes() == arr.tobytes()


def test_header_layout():
    data = to_bytes(sample_ckpt())
    assert data[:6] == MAGIC
    assert struct.unpack("<II", data[6:14]) == (1, 4)
    (n,) = struct.unpack("<H", data[14:16])
    assert data[16:16 + n] == b"a.weight"
    code, rank = struct.unpack("<BB", data[16 + n:18 + n])
    assert (code, rank) == (0, 2)
    assert struct.unpack("<2Q", data[18 + n:34 + n]) == (3, 4)


def test_bad_magic_and_version():
    data = bytearray(to_bytes(sample_ckpt()))
    with pytest.raises(CheckpointFormatError, match="magic"):
        from_bytes(b"XXXXXX" + bytes(data[6:]))
    data[6:10] = struct.pack("<I", 9)
    with pytest.raises(CheckpointFormatError, match="version"):
        from_bytes(bytes(data))


def test_tampered_dimension_rejected():
    data = bytearray(to_bytes(sample_ckpt()))
    n = len(b"a.weight")
    data[18 + n:26 + n] = struct.pack("<Q", 4)  # 3 x 4 -> 4 x 4
    with pytest.raises(CheckpointFormatError):
        from_bytes(bytes(data))


def test_truncated_file_is_io_error(tmp_path):
    data = to_bytes(sample_ckpt())
    for cut in (3, 20, 40, len(data) - 5):
        with pytest.raises(CheckpointTruncatedError) as info:
            from_bytes(data[:cut])
        assert isinstance(info.value, OSError)


def test_unsupported_dtype():
    with pytest.raises(ContractError):
        to_bytes(Checkpoint(OrderedDict(x=np.zeros(2, dtype=np.int32))))


def test_unknown_and_missing_names():
    params = {"w": Tensor(np.zeros((2, 2)))}
    with pytest.raises(CheckpointFormatError, match="unknown"):
        load_params_into(params, {"w": np.ones((2, 2)), "extra": np.ones(1)})
    with pytest.raises(CheckpointFormatError, match="lacks"):
        load_params_into(params, {})
    with pytest.raises(CheckpointFormatError, match="shape"):
        load_params_into(params, {"w": np.ones((3, 2))})


def test_eval_loss_preserved_after_reload(tmp_path, count_samples):
    cfg = quick_config(steps=3)
    result = run_training(cfg, tmp_path, train_samples=count_samples[:16])
    before = eval_loss(result.model, count_samples[:12], cfg)
    model, cfg2, _ = load_model(str(tmp_path / "final.bin"))
    assert cfg2 == cfg
    assert eval_loss(model, count_samples[:12], cfg2) == before
    for name, p in result.model.params.items():
        assert np.array_equal(p.data, model.params[name].data)
