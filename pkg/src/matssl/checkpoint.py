"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MSSL"  u16 version
    u32 count, then per parameter: u16 name length, UTF-8 name, u32 ndim, u32 dims...
    u64 payload byte length, then the float32 payload in manifest order
    u32 metadata length, then UTF-8 JSON (config snapshot, rng state, epoch)
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"MSSL"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict[str, Any] = field(default_factory=dict)
    rng_state: Any = None
    epoch: int = 0

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, Any], **kw) -> "Checkpoint":
        return cls({k: np.array(getattr(v, "data", v), np.float32) for k, v in tensors.items()}, **kw)

    def to_bytes(self) -> bytes:
        out = [MAGIC, struct.pack("<HI", VERSION, len(self.params))]
        payload = []
        for name, arr in self.params.items():
            raw = name.encode("utf-8")
            out.append(struct.pack("<H", len(raw)) + raw)
            out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            payload.append(np.ascontiguousarray(arr, "<f4").tobytes())
        blob = b"".join(payload)
        out.append(struct.pack("<Q", len(blob)))
        out.append(blob)
        meta = json.dumps({"config": self.config, "rng_state": self.rng_state, "epoch": self.epoch},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
        out.append(struct.pack("<I", len(meta)) + meta)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        reader = _Reader(buf)
        if reader.take(4) != MAGIC:
            raise CheckpointError("bad magic: not an MSSL checkpoint")
        version, count = reader.unpack("<HI")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        manifest = []
        for _ in range(count):
            (n,) = reader.unpack("<H")
            name = reader.take(n).decode("utf-8")
            (ndim,) = reader.unpack("<I")
            shape = reader.unpack(f"<{ndim}I") if ndim else ()
            manifest.append((name, tuple(shape)))
        (declared,) = reader.unpack("<Q")
        expected = sum(int(np.prod(s)) * 4 for _, s in manifest)
        if declared != expected:
            raise CheckpointError(f"payload length {declared} does not match manifest ({expected} bytes)")
        blob = reader.take(declared, what="payload")
        (mlen,) = reader.unpack("<I")
        meta = json.loads(reader.take(mlen, what="metadata").decode("utf-8"))
        if reader.pos != len(buf):
            raise CheckpointError(f"{len(buf) - reader.pos} trailing bytes after metadata")
        params, off = {}, 0
        for name, shape in manifest:
            size = int(np.prod(shape)) * 4
            params[name] = np.frombuffer(blob, "<f4", size // 4, off).astype(np.float32).reshape(shape)
            off += size
        return cls(params, meta.get("config", {}), meta.get("rng_state"), meta.get("epoch", 0))

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str = "header") -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated {what}: need {n} bytes at offset {self.pos}, "
                                  f"only {len(self.buf) - self.pos} left")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))
