"""Binary container used for checkpoints and datasets.

Layout: one ASCII line ``<magic> <header-bytes>\\n``, a JSON header of that many
bytes, then the named arrays as little-endian float64 in row-major order. The
header lists each array's name, shape and byte offset into the payload.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def write_blob(path: str | Path, magic: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries = []
    offset = 0
    for name, arr in arrays.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = json.dumps({"meta": meta, "arrays": entries}, indent=1).encode()
    with open(path, "wb") as fh:
        fh.write(f"{magic} {len(header)}\n".encode())
        fh.write(header)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_blob(path: str | Path, magic: str) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    tag, size = raw[:nl].decode().split()
    if tag != magic:
        raise ValueError(f"{path}: expected {magic} file, found {tag!r}")
    start = nl + 1 + int(size)
    header = json.loads(raw[nl + 1:start])
    payload = memoryview(raw)[start:]
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        buf = payload[e["offset"]:e["offset"] + 8 * n]
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(e["shape"])
    return header["meta"], arrays
