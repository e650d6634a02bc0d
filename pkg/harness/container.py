"""Binary tensor container used for checkpoints, samples and latent files.

Layout (all integers u32 little-endian):

    b"MPDT" | version | config length | config utf-8 | tensor count |
    per tensor: name length | name utf-8 | rank | dims... | float32 LE data

Tensors keep their insertion order, so decoding and re-encoding a file
reproduces it byte for byte.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from mpdit.errors import BadMagicError, ContainerError, TruncatedFileError, UnsupportedVersionError

MAGIC = b"MPDT"
VERSION = 1

_U32 = struct.Struct("<I")


@dataclass
class TensorFile:
    config_text: str = ""
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def encode(tensors: Mapping[str, np.ndarray], config_text: str = "") -> bytes:
    parts = [MAGIC, _U32.pack(VERSION)]
    blob = config_text.encode("utf-8")
    parts += [_U32.pack(len(blob)), blob, _U32.pack(len(tensors))]
    for name, array in tensors.items():
        raw_name = name.encode("utf-8")
        data = np.ascontiguousarray(array, dtype="<f4")
        parts += [_U32.pack(len(raw_name)), raw_name, _U32.pack(data.ndim)]
        parts += [_U32.pack(dim) for dim in data.shape]
        parts.append(data.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.pos + size
        if end > len(self.data):
            raise TruncatedFileError(f"file ends inside {what} (offset {self.pos}, need {size} bytes)")
        chunk = self.data[self.pos : end]
        self.pos = end
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def decode(data: bytes) -> TensorFile:
    head = data[:4]
    if head != MAGIC:
        if len(head) < 4 and MAGIC.startswith(head):
            raise TruncatedFileError(f"file ends inside magic ({len(data)} bytes)")
        raise BadMagicError(f"not a tensor container (magic {head!r})")
    reader = _Reader(data)
    reader.take(4, "magic")
    version = reader.u32("version")
    if version != VERSION:
        raise UnsupportedVersionError(f"container version {version} (supported: {VERSION})")
    config_text = reader.take(reader.u32("config length"), "config").decode("utf-8")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(reader.u32("tensor count")):
        name = reader.take(reader.u32("name length"), "tensor name").decode("utf-8")
        rank = reader.u32(f"rank of {name}")
        shape = tuple(reader.u32(f"dims of {name}") for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        raw = reader.take(4 * count, f"data of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    if reader.pos != len(data):
        raise ContainerError(f"{len(data) - reader.pos} trailing bytes after the last tensor")
    return TensorFile(config_text=config_text, tensors=tensors)


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], config_text: str = "") -> Path:
    """Write atomically: the target is either the old file or the complete new one."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(encode(tensors, config_text))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def load_tensors(path: str | os.PathLike) -> TensorFile:
    return decode(Path(path).read_bytes())
