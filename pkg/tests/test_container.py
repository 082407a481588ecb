import numpy as np
import pytest

from hybrid_avatar.container import ContainerError, load_arrays, save_arrays


def test_round_trip_keeps_dtypes_and_meta(tmp_path):
    arrays = {"f": np.linspace(0, 1, 12, dtype=np.float32).reshape(3, 4),
              "i": np.array([[0, 1, 2], [3, -4, 5]]),
              "b": np.array([True, False, True]),
              "s": np.float32(2.5) * np.ones(())}
    save_arrays(tmp_path / "a.havc", arrays, meta={"kind": "test", "n": 3})
    out, meta = load_arrays(tmp_path / "a.havc")
    assert meta == {"kind": "test", "n": 3}
    for k, v in arrays.items():
        assert out[k].shape == v.shape
        np.testing.assert_array_equal(out[k], v)
    assert out["i"].dtype == np.int64 and out["b"].dtype == bool


def test_large_integers_rejected(tmp_path):
    with pytest.raises(ContainerError):
        save_arrays(tmp_path / "x.havc", {"i": np.array([2**24])})


def test_unsupported_dtype_rejected(tmp_path):
    with pytest.raises(ContainerError):
        save_arrays(tmp_path / "x.havc", {"c": np.array([1j])})


def test_bad_magic_and_truncation(tmp_path):
    p = tmp_path / "bad.havc"
    p.write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(ContainerError):
        load_arrays(p)
    save_arrays(p, {"x": np.zeros(100, dtype=np.float32)})
    p.write_bytes(p.read_bytes()[:-40])
    with pytest.raises(ContainerError):
        load_arrays(p)
