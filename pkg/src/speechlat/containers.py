"""Binary containers: "WCUB" feature/latent files and "WCCK" checkpoints.

Both formats are little-endian and round-trip bit-exactly.

WCUB layout:
    magic "WCUB" | u32 version | u32 frame_rate | u64 T | u64 D
    | T*D float32 row-major values

WCCK layout:
    magic "WCCK" | u32 version | u32 metadata byte length | UTF-8 JSON metadata
    | u32 tensor count | per tensor:
        u16 name length | name bytes | u8 dtype code | u8 rank
        | rank * u64 dims | raw values
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DataError

WCUB_MAGIC = b"WCUB"
WCCK_MAGIC = b"WCCK"
WCUB_VERSION = 1
WCCK_VERSION = 1

_DTYPE_CODES = {
    np.dtype("float32"): 0,
    np.dtype("float64"): 1,
    np.dtype("int64"): 2,
    np.dtype("int32"): 3,
    np.dtype("uint8"): 4,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"truncated container: wanted {n} bytes, got {len(buf)}")
    return buf


def save_wcub(path, frames: np.ndarray, frame_rate: int) -> None:
    """Write a T x D float32 frame matrix to a WCUB file."""
    frames = np.ascontiguousarray(frames, dtype="<f4")
    if frames.ndim != 2:
        raise DataError(f"WCUB frames must be 2-D, got shape {frames.shape}")
    t, d = frames.shape
    with open(path, "wb") as fh:
        fh.write(WCUB_MAGIC)
        fh.write(struct.pack("<IIQQ", WCUB_VERSION, int(frame_rate), t, d))
        fh.write(frames.tobytes())


def load_wcub(path) -> tuple[np.ndarray, int]:
    """Load a WCUB file, returning (frames, frame_rate)."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != WCUB_MAGIC:
            raise DataError(f"bad magic {magic!r}, expected {WCUB_MAGIC!r}")
        version, frame_rate, t, d = struct.unpack("<IIQQ", _read_exact(fh, 24))
        if version != WCUB_VERSION:
            raise DataError(f"unsupported WCUB version {version}")
        raw = _read_exact(fh, t * d * 4)
        if fh.read(1):
            raise DataError("trailing bytes after WCUB payload")
    frames = np.frombuffer(raw, dtype="<f4").reshape(t, d).copy()
    return frames, frame_rate


def save_wcck(path, metadata: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write a checkpoint: JSON metadata plus a named-tensor table."""
    meta_bytes = json.dumps(metadata, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(WCCK_MAGIC)
        fh.write(struct.pack("<II", WCCK_VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            if arr.dtype not in _DTYPE_CODES:
                arr = arr.astype("float32")
            shape = arr.shape  # ascontiguousarray promotes 0-d to 1-d
            arr = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"))
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<BB", _DTYPE_CODES[np.dtype(arr.dtype.str[1:])], len(shape)))
            for dim in shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.tobytes())


def load_wcck(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Load a checkpoint, returning (metadata, tensors)."""
    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != WCCK_MAGIC:
            raise DataError(f"bad magic {magic!r}, expected {WCCK_MAGIC!r}")
        version, meta_len = struct.unpack("<II", _read_exact(fh, 8))
        if version != WCCK_VERSION:
            raise DataError(f"unsupported WCCK version {version}")
        metadata = json.loads(_read_exact(fh, meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            code, rank = struct.unpack("<BB", _read_exact(fh, 2))
            if code not in _CODE_DTYPES:
                raise DataError(f"unknown dtype code {code}")
            shape = tuple(
                struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(rank)
            )
            dtype = _CODE_DTYPES[code].newbyteorder("<")
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            raw = _read_exact(fh, nbytes)
            tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        if fh.read(1):
            raise DataError("trailing bytes after WCCK payload")
    return metadata, tensors
