"""Versioned, byte-deterministic checkpoint container.

Layout::

    b"DGSEGCKPT"  uint32 version  uint64 header_len  header(JSON, utf-8)  payload

The header holds the config echo, iteration, RNG states and an index of the
arrays (name, dtype, shape, byte offset) stored back to back in the payload.
JSON is written with sorted keys and no timestamps, so saving the same state
twice produces identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"DGSEGCKPT"
VERSION = 1


def save_checkpoint(path: str | Path, *, config: dict, arrays: dict[str, np.ndarray], meta: dict) -> None:
    index = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        raw = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"config": config, "meta": meta, "arrays": index}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray], dict]:
    """Return ``(config, arrays, meta)``."""
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise DataError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", blob, len(MAGIC))
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + struct.calcsize("<IQ")
    header = json.loads(blob[start:start + hlen])
    base = start + hlen
    arrays = {}
    for entry in header["arrays"]:
        lo = base + entry["offset"]
        raw = blob[lo:lo + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return header["config"], arrays, header["meta"]
