import hashlib

import numpy as np
import pytest

from bllm.checkpoint import load_checkpoint, save_checkpoint
from bllm.errors import DataError
from bllm.tensor import Matrix, Rng


def test_round_trip_bit_exact(tmp_path):
    rng = Rng(1)
    mats = {
        "w": Matrix(rng.normal(7, 3)),
        "b": Matrix(rng.normal(1, 3) * 1e-30),  # denormal-ish values survive
        "edge": Matrix(np.array([[0.0, -0.0, np.pi, 1e308]])),
    }
    path = tmp_path / "m.bllm"
    save_checkpoint(path, mats)
    loaded, meta = load_checkpoint(path)
    assert meta == {}
    assert set(loaded) == set(mats)
    for name in mats:
        assert loaded[name].a.tobytes() == mats[name].a.tobytes()


def test_write_order_independent_bytes(tmp_path):
    rng = Rng(2)
    a, b = Matrix(rng.normal(2, 2)), Matrix(rng.normal(3, 1))
    p1, p2 = tmp_path / "1.bllm", tmp_path / "2.bllm"
    save_checkpoint(p1, {"x": a, "y": b})
    save_checkpoint(p2, {"y": b, "x": a})
    assert hashlib.sha256(p1.read_bytes()).hexdigest() == \
        hashlib.sha256(p2.read_bytes()).hexdigest()


def test_meta_round_trip(tmp_path):
    meta = {"vocab": ["<pad>", "lane", "."], "config": {"d_model": 128, "heads": 4}}
    path = tmp_path / "m.bllm"
    save_checkpoint(path, {"w": Matrix([[1.0]])}, meta=meta)
    loaded, got = load_checkpoint(path)
    assert got == meta
    assert list(loaded) == ["w"]


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.bllm"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(DataError, match="magic"):
        load_checkpoint(path)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "m.bllm"
    save_checkpoint(path, {"w": Matrix(np.ones((4, 4)))})
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(DataError, match="truncated"):
        load_checkpoint(path)


def test_trailing_garbage_rejected(tmp_path):
    path = tmp_path / "m.bllm"
    save_checkpoint(path, {"w": Matrix(np.ones((1, 1)))})
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(DataError, match="trailing"):
        load_checkpoint(path)
