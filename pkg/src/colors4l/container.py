"""Versioned tensor container shared by colorizer and trainer checkpoints.

Layout (all integers little-endian)::

    b"CSL1" | u32 version | u32 len + UTF-8 JSON config | u32 tensor count
    per tensor: u32 len + UTF-8 name | u8 dtype | u8 rank | rank * u32 dims | payload
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"CSL1"
VERSION = 1

# 0 is the f32 code of the wire format; f64 and i64 carry probe nets and
# batch-norm counters.
DTYPE_CODES = {torch.float32: 0, torch.float64: 1, torch.int64: 2}
CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def dumps(config: dict, tensors: dict[str, torch.Tensor]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(_pack_str(json.dumps(config, sort_keys=True)))
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in DTYPE_CODES:
            raise TypeError(f"unsupported dtype {t.dtype} for tensor {name!r}")
        code = DTYPE_CODES[t.dtype]
        buf.write(_pack_str(name))
        buf.write(struct.pack("<BB", code, t.dim()))
        buf.write(struct.pack(f"<{t.dim()}I", *t.shape))
        buf.write(t.numpy().astype(CODE_DTYPES[code], copy=False).tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"{self.source}: truncated container (need {n} bytes at offset "
                f"{self.pos}, file has {len(self.data)})"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{self.source}: corrupt string field") from exc


def loads(data: bytes, source: str = "<bytes>") -> tuple[dict, dict[str, torch.Tensor]]:
    r = _Reader(data, source)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported container version {version}")
    try:
        config = json.loads(r.string())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{source}: corrupt config snapshot") from exc
    tensors = {}
    for _ in range(r.u32()):
        name = r.string()
        code, rank = struct.unpack("<BB", r.take(2))
        if code not in CODE_DTYPES:
            raise CheckpointError(f"{source}: unknown dtype code {code} for {name!r}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        dtype = CODE_DTYPES[code]
        count = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(count * dtype.itemsize), dtype=dtype).reshape(dims)
        tensors[name] = torch.from_numpy(arr.copy())
    if r.pos != len(data):
        raise CheckpointError(f"{source}: {len(data) - r.pos} trailing bytes")
    return config, tensors


def save(path, config: dict, tensors: dict[str, torch.Tensor]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(config, tensors))
    tmp.replace(path)
    return path


def load(path) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(data, str(path))
