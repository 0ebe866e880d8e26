"""Versioned binary container for model parameters.

Layout: ``b"PLMP"``, u16 version, u32 header length, UTF-8 JSON header
(kind, metadata, array shapes/dtypes), then the raw little-endian arrays.
Output is byte-for-byte deterministic for equal inputs.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PLMP"
VERSION = 1


class ModelFileError(ValueError):
    pass


def save_arrays(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    specs = []
    blobs = []
    for name in arrays:
        a = np.asarray(arrays[name])
        dt = a.dtype.newbyteorder("<")
        specs.append({"name": name, "dtype": dt.str, "shape": list(a.shape)})
        blobs.append(np.ascontiguousarray(a, dtype=dt).tobytes())
    header = json.dumps({"kind": kind, "meta": meta, "arrays": specs}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<HI", VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_arrays(path, kind: str | None = None) -> tuple[str, dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < 10 or data[:4] != MAGIC:
        raise ModelFileError(f"{path}: not a model file")
    version, n = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise ModelFileError(f"{path}: model file version {version}, expected {VERSION}")
    try:
        header = json.loads(data[10:10 + n])
    except ValueError as exc:
        raise ModelFileError(f"{path}: unreadable header") from exc
    if kind is not None and header["kind"] != kind:
        raise ModelFileError(f"{path}: holds a {header['kind']!r}, expected {kind!r}")
    off = 10 + n
    arrays = {}
    for spec in header["arrays"]:
        dt = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        if off + count * dt.itemsize > len(data):
            raise ModelFileError(f"{path}: truncated")
        arrays[spec["name"]] = np.frombuffer(data, dt, count, off).reshape(tuple(spec["shape"])).copy()
        off += count * dt.itemsize
    return header["kind"], header["meta"], arrays
