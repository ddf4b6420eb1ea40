"""Binary checkpoint format.

Layout (little-endian)::

    b"RNCK" | u32 version | u32 meta_len | meta (UTF-8 JSON, sorted keys)
    u32 entry_count
    entry_count x ( u32 name_len | name | u32 rank | rank x u32 dims | f32 payload )

Optimizer moments are stored as entries named ``adam.m/<param>`` and
``adam.v/<param>``. Phase tag, plateau state, RNG state, iteration count and
model/projection configs live in the JSON block.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

from .projection import MalformedFileError

MAGIC = b"RNCK"
VERSION = 1
_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    adam_m: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def phase(self) -> str:
        return self.meta.get("phase", "")

    def to_bytes(self) -> bytes:
        chunks = [MAGIC, _U32.pack(VERSION)]
        meta = json.dumps(self.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        chunks += [_U32.pack(len(meta)), meta]
        entries = list(self.params.items())
        entries += [(f"adam.m/{k}", v) for k, v in self.adam_m.items()]
        entries += [(f"adam.v/{k}", v) for k, v in self.adam_v.items()]
        chunks.append(_U32.pack(len(entries)))
        for name, arr in entries:
            raw = name.encode("utf-8")
            arr = np.asarray(arr)
            chunks += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
            chunks += [_U32.pack(d) for d in arr.shape]
            chunks.append(arr.astype("<f4").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        view = memoryview(raw)
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(view):
                raise MalformedFileError("checkpoint is truncated")
            out = view[pos:pos + n]
            pos += n
            return out

        def u32():
            return _U32.unpack(take(4))[0]

        if bytes(take(4)) != MAGIC:
            raise MalformedFileError("not a checkpoint (bad magic)")
        version = u32()
        if version != VERSION:
            raise MalformedFileError(f"unsupported checkpoint version {version}")
        try:
            meta = json.loads(bytes(take(u32())).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise MalformedFileError(f"checkpoint metadata is corrupt: {exc}") from exc
        params, m, v = {}, {}, {}
        for _ in range(u32()):
            name = bytes(take(u32())).decode("utf-8")
            shape = tuple(u32() for _ in range(u32()))
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
            if name.startswith("adam.m/"):
                m[name[7:]] = arr
            elif name.startswith("adam.v/"):
                v[name[7:]] = arr
            else:
                params[name] = arr
        if pos != len(view):
            raise MalformedFileError("trailing bytes after checkpoint table")
        return cls(params, meta, m, v)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Atomic write through a temp file in the same directory."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(ckpt.to_bytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())
