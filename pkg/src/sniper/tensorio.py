"""Versioned binary container for named tensors.

Layout (all integers little-endian)::

    magic      8 bytes, identifies the file kind
    version    uint16
    hdr_len    uint32
    header     hdr_len bytes of UTF-8 JSON: {"meta": {...}, "tensors": [...]}
    payload    raw tensor bytes, concatenated in header order

Each tensor entry records ``name``, ``dtype`` (``<f8`` or ``|u1``), ``shape``,
``offset`` (relative to payload start) and ``nbytes``.  Round-trips are
bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

VERSION = 1
_PREFIX = struct.Struct("<8sHI")
_DTYPES = {"<f8": np.dtype("<f8"), "|u1": np.dtype("u1")}


class ContainerError(ValueError):
    pass


def write_container(path, magic: bytes, meta: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dtype = "|u1" if arr.dtype == np.uint8 else "<f8"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(magic, VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    data = path.read_bytes()
    if len(data) < _PREFIX.size:
        raise ContainerError(f"{path}: truncated header")
    got_magic, version, hdr_len = _PREFIX.unpack_from(data)
    if got_magic != magic:
        raise ContainerError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    start = _PREFIX.size + hdr_len
    try:
        header = json.loads(data[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: corrupt header ({exc})") from None
    tensors = {}
    for e in header["tensors"]:
        lo = start + e["offset"]
        raw = data[lo:lo + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ContainerError(f"{path}: payload for {e['name']} is truncated")
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
        tensors[e["name"]] = arr
    return header["meta"], tensors
