"""Checkpoint container: round trips, versioning, corruption handling."""

import numpy as np
import pytest

from reenact.checkpoint import MAGIC, load_checkpoint, save_checkpoint


def records():
    rng = np.random.default_rng(0)
    return {"a.weight": rng.standard_normal((3, 4)),
            "a.bias": rng.standard_normal(4),
            "scalar": np.array(2.5)}


def test_v1_round_trips_float32_exactly(tmp_path):
    path = tmp_path / "model.ckpt"
    rec = {k: v.astype(np.float32).astype(np.float64) for k, v in records().items()}
    save_checkpoint(path, rec, version=1)
    back, version = load_checkpoint(path)
    assert version == 1
    assert list(back.keys()) == list(rec.keys())
    for k in rec:
        np.testing.assert_array_equal(back[k], rec[k])


def test_v2_round_trips_float64_exactly(tmp_path):
    path = tmp_path / "model.ckpt"
    rec = records()
    save_checkpoint(path, rec, version=2)
    back, version = load_checkpoint(path)
    assert version == 2
    for k in rec:
        np.testing.assert_array_equal(back[k], rec[k])


def test_v1_quantizes_to_float32(tmp_path):
    path = tmp_path / "model.ckpt"
    x = np.array([1.0 + 1e-12])
    save_checkpoint(path, {"x": x}, version=1)
    back, _ = load_checkpoint(path)
    assert back["x"][0] == np.float32(x[0])


def test_magic_and_bad_file(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, records())
    assert path.read_bytes()[:4] == MAGIC
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"JUNK" + path.read_bytes()[4:])
    with pytest.raises(ValueError):
        load_checkpoint(bad)


def test_unknown_version_rejected(tmp_path):
    with pytest.raises(ValueError):
        save_checkpoint(tmp_path / "x.ckpt", records(), version=9)


def test_deterministic_bytes(tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, records())
    save_checkpoint(b, records())
    assert a.read_bytes() == b.read_bytes()
