"""Binary checkpoint format.

Layout (little-endian)::

    b"D3CK"  u16 version  u32 len + head_kind utf-8  u32 dim  u32 n_tokens  u32 n_tensors
    per tensor:  u32 len + name utf-8  u8 ndim  u32 * ndim shape  float32 data (row-major)
    u32 len + JSON provenance blob (utf-8, sorted keys)

Tensors are written in sorted name order so equal weights give equal bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .heads import HEAD_KINDS, HeadParams

MAGIC = b"D3CK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def dumps(params: HeadParams, provenance: dict | None = None) -> bytes:
    out = [MAGIC, struct.pack("<H", VERSION), _str(params.head_kind),
           struct.pack("<III", params.dim, params.n_tokens, len(params.weights))]
    for name in sorted(params.weights):
        arr = np.ascontiguousarray(params.weights[name], dtype="<f4")
        out += [_str(name), struct.pack("<B", arr.ndim), struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    out.append(_str(json.dumps(provenance or {}, sort_keys=True)))
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("corrupt string field") from exc


def loads(buf: bytes) -> tuple[HeadParams, dict]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a D3CK checkpoint")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    kind = r.string()
    if kind not in HEAD_KINDS:
        raise CheckpointError(f"unknown head kind {kind!r}")
    dim, n_tokens, count = r.unpack("<III")
    weights = {}
    for _ in range(count):
        name = r.string()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape)
        weights[name] = arr.astype(np.float64)
    try:
        provenance = json.loads(r.string())
    except json.JSONDecodeError as exc:
        raise CheckpointError("corrupt provenance blob") from exc
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint")
    params = HeadParams(kind, dim, n_tokens, weights)
    try:
        params.check_finite()
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    return params, provenance


def save(path, params: HeadParams, provenance: dict | None = None) -> None:
    Path(path).write_bytes(dumps(params, provenance))


def load(path) -> tuple[HeadParams, dict]:
    return loads(Path(path).read_bytes())
