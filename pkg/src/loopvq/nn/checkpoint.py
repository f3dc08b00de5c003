"""Checkpoint container.

Layout (little-endian)::

    b"CKPT"  u16 version
    u16 len + model-kind tag (utf-8)
    u32 len + config JSON (utf-8)
    u32 entry count
    per entry: u16 len + name, u8 rank, rank x u32 dims, float32 payload
"""

from __future__ import annotations

import json
import os
import struct
from typing import Dict, Tuple

import numpy as np

from ..formats import Reader, VersionMismatchError, check_magic, pack_string

MAGIC = b"CKPT"
VERSION = 1


def checkpoint_to_bytes(kind: str, state: Dict[str, np.ndarray], config: Dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION), pack_string(kind),
             pack_string(json.dumps(config or {}, sort_keys=True), "I"),
             struct.pack("<I", len(state))]
    for name in sorted(state):
        arr = np.asarray(state[name], dtype="<f4")
        parts.append(pack_string(name))
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def checkpoint_from_bytes(data: bytes, what: str = "checkpoint") -> Tuple[str, Dict, Dict[str, np.ndarray]]:
    reader = Reader(data, what)
    check_magic(reader, MAGIC)
    version = reader.u16()
    if version != VERSION:
        raise VersionMismatchError(f"{what}: checkpoint version {version}, expected {VERSION}")
    kind = reader.string()
    config = json.loads(reader.string("I"))
    count = reader.u32()
    state = {}
    for _ in range(count):
        name = reader.string()
        rank = reader.u8()
        shape = reader.unpack(f"{rank}I") if rank else ()
        n = int(np.prod(shape)) if rank else 1
        state[name] = np.frombuffer(reader.take(4 * n), dtype="<f4").reshape(shape).copy()
    reader.expect_end()
    return kind, config, state


def save_checkpoint(path, kind: str, state: Dict[str, np.ndarray], config: Dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_to_bytes(kind, state, config))


def load_checkpoint(path) -> Tuple[str, Dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read(), what=os.fspath(path))
