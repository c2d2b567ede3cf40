import numpy as np
import pytest

from tablebot.checkpoint import (
    CheckpointError,
    MAGIC,
    load_checkpoint,
    load_training_state,
    save_checkpoint,
    save_training_state,
)
from tablebot.optim import AdamWState
from tablebot.tensor import Tensor


def test_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "enc/w": rng.normal(size=(4, 5)).astype(np.float32),
        "pol/b": rng.normal(size=(7,)).astype(np.float32),
        "scalar": np.float32(3.25).reshape(()),
    }
    p = tmp_path / "c.itrl"
    save_checkpoint(p, arrays, meta={"preset": "small", "fusion": "joint"})
    loaded, meta = load_checkpoint(p)
    assert meta == {"preset": "small", "fusion": "joint"}
    assert set(loaded) == set(arrays)
    for k in arrays:
        assert np.array_equal(loaded[k], arrays[k])
        assert loaded[k].dtype == np.float32


def test_file_starts_with_magic_and_version(tmp_path):
    p = tmp_path / "c.itrl"
    save_checkpoint(p, {"x": np.zeros(2, dtype=np.float32)})
    blob = p.read_bytes()
    assert blob[:4] == MAGIC == b"ITRL"
    assert blob[4] == 1


def test_save_is_byte_deterministic(tmp_path):
    arrays = {"b": np.ones(3, dtype=np.float32), "a": np.zeros(2, dtype=np.float32)}
    p1, p2 = tmp_path / "1.itrl", tmp_path / "2.itrl"
    save_checkpoint(p1, dict(reversed(list(arrays.items()))), meta={"k": "v"})
    save_checkpoint(p2, arrays, meta={"k": "v"})
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "bad.itrl"
    p.write_bytes(b"NOPE" + b"\x01")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)


def test_training_state_roundtrip(tmp_path):
    params = {"w": Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)}
    opt = AdamWState()
    opt.buffers_for("w", (2, 3))
    opt.m["w"][:] = 0.5
    opt.step = 42
    p = tmp_path / "t.itrl"
    save_training_state(p, params, opt, meta={"context": "4"})
    arrays, opt2, meta = load_training_state(p)
    assert meta["context"] == "4"
    assert opt2.step == 42
    assert np.array_equal(opt2.m["w"], opt.m["w"])
    assert np.array_equal(opt2.v["w"], opt.v["w"])
    assert np.array_equal(arrays["w"], params["w"].data)
