import numpy as np
import pytest

from sgshuffle import checkpoint


def test_round_trip_exact(tmp_path, rng):
    arrays = {"b": rng.standard_normal((3, 4)), "a": rng.standard_normal(5), "s": np.array(2.5)}
    digest = checkpoint.save(tmp_path / "p.sgsp", arrays, {"note": "x"})
    back, meta = checkpoint.load(tmp_path / "p.sgsp")
    assert meta == {"note": "x"} and list(back) == ["b", "a", "s"]
    assert all(np.array_equal(back[k], v) and back[k].shape == np.shape(v) for k, v in arrays.items())
    assert digest == checkpoint.file_sha256(tmp_path / "p.sgsp")


def test_equal_contents_give_equal_bytes(rng):
    arrays = {"w": rng.standard_normal((2, 2))}
    assert checkpoint.dumps(arrays, {"b": 1, "a": 2}) == checkpoint.dumps(dict(arrays), {"a": 2, "b": 1})


def test_layout_is_documented(rng):
    blob = checkpoint.dumps({"w": np.array([1.5, -2.0])})
    assert blob[:8] == b"SGSPARAM"
    hlen = int.from_bytes(blob[8:16], "little")
    assert np.array_equal(np.frombuffer(blob[16 + hlen :], dtype="<f8"), [1.5, -2.0])


def test_rejects_garbage_and_truncation():
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"not a checkpoint at all")
    blob = checkpoint.dumps({"w": np.ones(4)})
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(blob[:-8])
