"""Binary checkpoints.

Layout (little-endian)::

    b"CBXT" | u32 version | u32 param count
    per parameter: u16 name length | name (UTF-8) | u8 tag | u8 rank | u32 dims[rank] | f64 data
    u32 config length | config text (UTF-8, INI)
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nnet import Module

MAGIC = b"CBXT"
VERSION = 1
TAGS = {"base": 0, "adapter": 1, "plm": 2}
TAG_NAMES = {v: k for k, v in TAGS.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray] = field(default_factory=dict)
    tags: dict[str, str] = field(default_factory=dict)
    config: str = ""

    def add_module(self, module: Module, tag: str, prefix: str | None = None) -> "Checkpoint":
        if tag not in TAGS:
            raise CheckpointError(f"unknown tag {tag!r}")
        prefix = tag + "." if prefix is None else prefix
        for name, p in module.named_parameters():
            key = prefix + name
            if key in self.params:
                raise CheckpointError(f"duplicate parameter name {key!r}")
            self.params[key] = p.data.copy()
            self.tags[key] = tag
        return self

    def load_into(self, module: Module, tag: str, prefix: str | None = None) -> None:
        """Copy the ``tag`` parameters into ``module``; names and shapes must match exactly."""
        prefix = tag + "." if prefix is None else prefix
        own = dict(module.named_parameters())
        stored = {k[len(prefix):]: k for k, t in self.tags.items() if t == tag and k.startswith(prefix)}
        for name in stored:
            if name not in own:
                raise CheckpointError(f"unknown parameter name {stored[name]!r}")
        for name, p in own.items():
            if name not in stored:
                raise CheckpointError(f"checkpoint lacks parameter {prefix + name!r}")
            arr = self.params[stored[name]]
            if arr.shape != p.shape:
                raise CheckpointError(f"shape mismatch for {stored[name]!r}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()

    def names(self, tag: str) -> list[str]:
        return [k for k, t in self.tags.items() if t == tag]


def to_bytes(ckpt: Checkpoint) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(ckpt.params))]
    for name, arr in ckpt.params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", TAGS[ckpt.tags[name]], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    cfg = ckpt.config.encode("utf-8")
    out.append(struct.pack("<I", len(cfg)) + cfg)
    return b"".join(out)


def from_bytes(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{source}: truncated while reading {what}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    magic = take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported version {version}, expected {VERSION}")
    ckpt = Checkpoint()
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(n, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{source}: parameter name is not UTF-8") from None
        tag, rank = struct.unpack("<BB", take(2, f"{name} header"))
        if tag not in TAG_NAMES:
            raise CheckpointError(f"{source}: parameter {name!r} has unknown tag {tag}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} dims"))
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(8 * size, f"{name} data"), dtype="<f8").astype(np.float64)
        ckpt.params[name] = data.reshape(dims)
        ckpt.tags[name] = TAG_NAMES[tag]
    (n,) = struct.unpack("<I", take(4, "config length"))
    ckpt.config = take(n, "config").decode("utf-8")
    if pos != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - pos} trailing bytes")
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(to_bytes(ckpt))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), str(path))
