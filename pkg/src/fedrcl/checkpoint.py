"""Binary container for named float64 arrays.

Layout::

    8 bytes   magic  b"FRCLCKP1"
    8 bytes   header length H, unsigned little-endian
    H bytes   UTF-8 JSON header:
                {"arrays": [{"name", "shape", "offset", "count"}, ...],
                 "meta": {...}}
    rest      array payloads, float64 little-endian, C order, concatenated;
              ``offset`` and ``count`` are measured in float64 elements.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"FRCLCKP1"


def write_arrays(path: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, offset = [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += arr.size
    header = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(MAGIC + struct.pack("<Q", len(header)) + header + payload)
    os.replace(tmp, path)


def read_arrays(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    data = np.frombuffer(raw[16 + hlen:], dtype="<f8")
    arrays = {}
    for e in header["arrays"]:
        chunk = data[e["offset"]:e["offset"] + e["count"]]
        if chunk.size != e["count"]:
            raise FormatError(f"{path}: array {e['name']!r} is truncated")
        arrays[e["name"]] = chunk.astype(np.float64).reshape(e["shape"])
    return arrays, header["meta"]
