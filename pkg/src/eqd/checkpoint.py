"""Versioned binary parameter store.

Layout (all integers little-endian)::

    b"EQCK"  u32 version  u32 header_len  header (UTF-8 JSON)
    then per tensor, in manifest order:
        u32 name_len  name (UTF-8)  u8 dtype code  u32 rank  u64 dims[rank]  raw values

The JSON header carries the model config, the tensor manifest, per-tensor
freeze flags, the RNG seed and free-form metadata.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import BadMagic, CorruptSegment, VersionMismatch

MAGIC = b"EQCK"
FORMAT_VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


def encode(tensors: Mapping[str, np.ndarray], header: dict) -> bytes:
    arrays = {}
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_CODES:
            raise TypeError(f"unsupported dtype {arr.dtype} for {name}")
        arrays[name] = np.asarray(arr, dtype=dt, order="C")
    head = dict(header)
    head["manifest"] = [
        {"name": n, "dtype": a.dtype.str, "shape": list(a.shape)} for n, a in arrays.items()
    ]
    hbytes = json.dumps(head, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(hbytes)), hbytes]
    for name, a in arrays.items():
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BI", DTYPE_CODES[a.dtype], a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptSegment(f"truncated while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagic("not an EQCK checkpoint")
    r.pos = 4
    version, hlen = r.unpack("<II", "version")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(r.take(hlen, "header").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptSegment(f"bad header: {exc}") from None
    tensors: dict[str, np.ndarray] = {}
    for entry in header.get("manifest", []):
        (nlen,) = r.unpack("<I", "name length")
        name = r.take(nlen, "name").decode()
        if name != entry["name"]:
            raise CorruptSegment(f"segment {name!r} does not match manifest entry {entry['name']!r}")
        code, rank = r.unpack("<BI", f"{name} dtype/rank")
        if code not in CODE_DTYPES:
            raise CorruptSegment(f"unknown dtype code {code} in {name}")
        dims = r.unpack(f"<{rank}Q", f"{name} shape")
        dt = CODE_DTYPES[code]
        if list(dims) != entry["shape"] or dt.str != entry["dtype"]:
            raise CorruptSegment(f"segment {name} disagrees with manifest")
        n = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(n, f"{name} values"), dtype=dt).reshape(dims).copy()
    if r.pos != len(buf):
        raise CorruptSegment("trailing bytes after last segment")
    return header, tensors


def save(path: str | Path, tensors: Mapping[str, np.ndarray], header: dict) -> str:
    """Write a checkpoint and return its sha256 hex digest."""
    data = encode(tensors, header)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())


def tensor_digest(arrays: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.asarray(arrays[name], order="C")
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
