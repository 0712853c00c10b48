import json
import struct

import numpy as np
import pytest

from speechlat.containers import load_wcck, load_wcub, save_wcck, save_wcub
from speechlat.errors import DataError


def test_wcub_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    for trial in range(10):
        T, D = int(rng.integers(1, 40)), int(rng.integers(1, 20))
        x = rng.standard_normal((T, D)).astype(np.float32)
        path = tmp_path / f"rt{trial}.wcub"
        save_wcub(path, x, 50)
        y, rate = load_wcub(path)
        assert rate == 50
        assert y.dtype == np.float32
        assert y.tobytes() == x.tobytes()


def test_wcub_header_fields(tmp_path):
    x = np.arange(12, dtype=np.float32).reshape(3, 4)
    path = tmp_path / "hdr.wcub"
    save_wcub(path, x, 25)
    raw = path.read_bytes()
    magic, version, rate, T, D = struct.unpack("<4sIIQQ", raw[:28])
    assert magic == b"WCUB"
    assert (rate, T, D) == (25, 3, 4)
    # Payload is row-major little-endian float32: an independent decode of the
    # raw bytes must reproduce the matrix.
    vals = np.frombuffer(raw[28:], dtype="<f4").reshape(3, 4)
    assert np.array_equal(vals, x)


def test_wcub_truncated_and_bad_magic(tmp_path):
    x = np.zeros((4, 4), dtype=np.float32)
    path = tmp_path / "t.wcub"
    save_wcub(path, x, 50)
    raw = path.read_bytes()
    (tmp_path / "trunc.wcub").write_bytes(raw[:-3])
    with pytest.raises(DataError):
        load_wcub(tmp_path / "trunc.wcub")
    (tmp_path / "bad.wcub").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DataError):
        load_wcub(tmp_path / "bad.wcub")


def test_wcck_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(7)
    meta = {"kind": "test", "step": 17, "nested": {"a": [1, 2, 3]}}
    tensors = {
        "w.f32": rng.standard_normal((5, 3)).astype(np.float32),
        "w.f64": rng.standard_normal(9).astype(np.float64),
        "ids": np.array([3, 1, 4, 1, 5], dtype=np.int64),
        "scalar": np.array(2.5, dtype=np.float32),
    }
    path = tmp_path / "ck.wcck"
    save_wcck(path, meta, tensors)
    meta2, tensors2 = load_wcck(path)
    assert meta2 == meta
    assert set(tensors2) == set(tensors)
    for name, t in tensors.items():
        assert tensors2[name].dtype == t.dtype
        assert tensors2[name].shape == t.shape
        assert tensors2[name].tobytes() == t.tobytes()
    # Saving the loaded copy must reproduce the file byte for byte.
    save_wcck(tmp_path / "ck2.wcck", meta2, tensors2)
    assert (tmp_path / "ck2.wcck").read_bytes() == path.read_bytes()


def test_wcck_header_and_metadata_encoding(tmp_path):
    path = tmp_path / "h.wcck"
    save_wcck(path, {"x": 1}, {"t": np.zeros(2, dtype=np.float32)})
    raw = path.read_bytes()
    magic, version, meta_len = struct.unpack("<4sII", raw[:12])
    assert magic == b"WCCK"
    assert json.loads(raw[12:12 + meta_len]) == {"x": 1}


def test_wcck_truncation_errors(tmp_path):
    path = tmp_path / "ok.wcck"
    save_wcck(path, {"k": 0}, {"a": np.ones((2, 2), dtype=np.float32)})
    raw = path.read_bytes()
    for cut in (5, 11, len(raw) - 1):
        bad = tmp_path / f"cut{cut}.wcck"
        bad.write_bytes(raw[:cut])
        with pytest.raises(DataError):
            load_wcck(bad)
