"""Array container: a JSON header followed by one little-endian float32 blob.

Layout on disk::

    b"HAVC" | uint32 version | uint64 header_len | header (utf-8 JSON) | blob

The header lists every array with its name, shape, logical dtype and byte
offset into the blob. Integer arrays are stored as float32 and cast back on
load, so they must stay below 2**24 in magnitude.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"HAVC"
VERSION = 1
_INT_LIMIT = 2**24


class ContainerError(ValueError):
    """Raised for malformed or inconsistent container files."""


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        kind = arr.dtype.kind
        if kind in "iub":
            if arr.size and np.abs(arr.astype(np.int64)).max() >= _INT_LIMIT:
                raise ContainerError(f"integer array {name!r} exceeds float32-exact range")
            logical = "int64" if kind in "iu" else "bool"
        elif kind == "f":
            logical = "float32"
        else:
            raise ContainerError(f"unsupported dtype {arr.dtype} for {name!r}")
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": logical,
             "offset": offset, "nbytes": len(data)}
        )
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode()
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for data in chunks:
            fh.write(data)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ContainerError(f"{path}: not a container file")
    version, header_len = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    try:
        header = json.loads(raw[16:16 + header_len])
    except json.JSONDecodeError as exc:
        raise ContainerError(f"{path}: corrupt header") from exc
    blob = memoryview(raw)[16 + header_len:]
    out = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if entry["nbytes"] != 4 * count or entry["offset"] + entry["nbytes"] > len(blob):
            raise ContainerError(f"{path}: array {entry['name']!r} has inconsistent size")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"]).reshape(shape)
        if entry["dtype"] == "int64":
            arr = arr.astype(np.int64)
        elif entry["dtype"] == "bool":
            arr = arr.astype(bool)
        else:
            arr = arr.astype(np.float32)
        out[entry["name"]] = arr
    return out, header.get("meta", {})
