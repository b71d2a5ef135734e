"""Versioned binary parameter container with bit-exact round trips.

Layout: magic, 8-byte little-endian header length, a JSON header listing
tensor names/shapes/offsets plus the config hash, then raw float64 bytes in
C order.  No timestamps anywhere, so identical parameters always produce
identical files.
"""

from __future__ import annotations

import json
import struct
from typing import Optional

import numpy as np

from .tensor import Tensor

MAGIC = b"BIFUSION1\n"
FORMAT_VERSION = 1


def save_checkpoint(path: str, params: dict, config_hash: str,
                    extra: Optional[dict] = None) -> None:
    arrays = {}
    for name in sorted(params):
        value = params[name]
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        arrays[name] = np.ascontiguousarray(arr, dtype=np.float64)
    entries = []
    offset = 0
    for name, arr in arrays.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {
        "version": FORMAT_VERSION,
        "config_hash": config_hash,
        "extra": extra or {},
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(arr.tobytes())


def load_checkpoint(path: str) -> tuple:
    """Returns (params name->float64 array, header dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version")
        payload = fh.read()
    params = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype=np.float64, count=count,
                            offset=start).reshape(shape).copy()
        params[entry["name"]] = arr
    return params, header
