"""VLBC binary checkpoints.

Layout, all integers little-endian::

    b"VLBC"  u32 version
    u32 count, then per tensor (sorted by name):
        u32 name length, UTF-8 name, u32 rank, u64 extent * rank, f32 * prod(extents)
    u32 count, then optimizer tensors in the same encoding
        (names ``first/<param>`` and ``second/<param>``)
    u64 step
    u32 length, UTF-8 config fingerprint

Values are stored as 32-bit floats, so float32 models round-trip bit-exactly.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"VLBC"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint; the message names the byte offset."""


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    fingerprint: str = ""
    version: int = VERSION


def _pack_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def encode(ckpt: Checkpoint) -> bytes:
    fp = ckpt.fingerprint.encode("utf-8")
    return b"".join([
        MAGIC,
        struct.pack("<I", ckpt.version),
        _pack_tensors(ckpt.tensors),
        _pack_tensors(ckpt.optimizer),
        struct.pack("<Q", ckpt.step),
        struct.pack("<I", len(fp)) + fp,
    ])


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: {what} needs {n} bytes at offset {self.pos}, "
                                  f"{len(self.data) - self.pos} left")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        count = self.u32("tensor count")
        for _ in range(count):
            at = self.pos
            name_len = self.u32("name length")
            try:
                name = self.take(name_len, "tensor name").decode("utf-8")
            except UnicodeDecodeError:
                raise CheckpointError(f"tensor name at offset {at} is not UTF-8") from None
            rank = self.u32("rank")
            if rank > 8:
                raise CheckpointError(f"implausible rank {rank} for {name!r} at offset {self.pos - 4}")
            shape = tuple(self.u64("extent") for _ in range(rank))
            n = int(np.prod(shape, dtype=np.uint64)) if shape else 1
            out[name] = np.frombuffer(self.take(4 * n, f"data of {name!r}"), dtype="<f4").reshape(shape).copy()
        return out


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at offset 0")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} at offset 4")
    tensors = r.tensors()
    optimizer = r.tensors()
    step = r.u64("step")
    fp = r.take(r.u32("fingerprint length"), "fingerprint").decode("utf-8", errors="replace")
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes at offset {r.pos}")
    return Checkpoint(tensors, optimizer, step, fp, version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode(ckpt))


def load_checkpoint(path, expected_fingerprint: str | None = None) -> Checkpoint:
    ckpt = decode(Path(path).read_bytes())
    if expected_fingerprint is not None and ckpt.fingerprint != expected_fingerprint:
        warnings.warn(f"checkpoint {path} was written under config {ckpt.fingerprint or '<none>'}, "
                      f"current config is {expected_fingerprint}", RuntimeWarning, stacklevel=2)
    return ckpt


# --- model <-> checkpoint -----------------------------------------------------------


def model_state(model, optimizer=None, step: int = 0, fingerprint: str = "") -> Checkpoint:
    named = model.named_parameters()
    tensors = {k: v.data for k, v in named.items()}
    opt: dict[str, np.ndarray] = {}
    if optimizer is not None:
        by_id = {id(p): k for k, p in named.items()}
        for p, m in zip(optimizer.params, optimizer.state.first):
            opt[f"first/{by_id[id(p)]}"] = m
        for p, v in zip(optimizer.params, optimizer.state.second):
            opt[f"second/{by_id[id(p)]}"] = v
        opt["state/step"] = np.array(optimizer.state.step, dtype=np.float32)
    return Checkpoint(tensors, opt, step, fingerprint)


def restore_model(model, ckpt: Checkpoint, strict: bool = False) -> list[str]:
    """Copy matching tensors into ``model``; returns names that were missing from ``ckpt``."""
    named = model.named_parameters()
    missing = []
    for name, p in named.items():
        if name not in ckpt.tensors:
            missing.append(name)
            continue
        src = ckpt.tensors[name]
        if src.shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {src.shape}, model {p.shape}")
        p.data[...] = src
    if strict and missing:
        raise CheckpointError(f"checkpoint lacks {missing}")
    return missing


def restore_optimizer(optimizer, model, ckpt: Checkpoint) -> None:
    by_id = {id(p): k for k, p in model.named_parameters().items()}
    for k, p in enumerate(optimizer.params):
        name = by_id[id(p)]
        optimizer.state.first[k][...] = ckpt.optimizer[f"first/{name}"]
        if optimizer.state.second:
            optimizer.state.second[k][...] = ckpt.optimizer[f"second/{name}"]
    optimizer.state.step = int(ckpt.optimizer["state/step"])
