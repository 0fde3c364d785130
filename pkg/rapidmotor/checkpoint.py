"""
RMA1 checkpoint container.

Layout (little-endian):
    b"RMA1" | u32 version | str tag | str meta | u32 count |
    count x (str name | u32 ndim | ndim x u64 dim | f64 data)
where str is a u32 byte length followed by UTF-8 bytes.
"""

import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np


logger = logging.getLogger(__name__)

MAGIC = b"RMA1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tag: str
    meta: dict = field(default_factory=dict)
    arrays: dict = field(default_factory=dict)

    def require(self, *names):
        missing = [n for n in names if n not in self.arrays]
        if missing:
            raise CheckpointError(f"checkpoint '{self.tag}' lacks entries: {', '.join(missing)}")

    def subtree(self, prefix):
        return {k: v for k, v in self.arrays.items() if k.startswith(prefix)}


def encode_meta(meta):
    return "\n".join(f"{k}={v}" for k, v in sorted(meta.items()))


def decode_meta(text):
    meta = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"bad metadata line: {line!r}")
        meta[key.strip()] = value.strip()
    return meta


def _pack_str(text):
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save(path, arrays, tag, meta=None):
    """Write arrays (name -> ndarray, insertion order kept) to path atomically."""
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), _pack_str(tag),
              _pack_str(encode_meta(meta or {})), struct.pack("<I", len(arrays))]
    for name, value in arrays.items():
        value = np.asarray(value, dtype="<f8")
        chunks.append(_pack_str(name))
        chunks.append(struct.pack("<I", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        chunks.append(np.ascontiguousarray(value).tobytes())

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = path + ".tmp"
    with open(tmp_path, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp_path, path)
    logger.info(f"[CKPT] Saved {tag} checkpoint with {len(arrays)} entries to {path}")
    return path


class _Reader:
    def __init__(self, raw, path):
        self.raw = raw
        self.offset = 0
        self.path = path

    def take(self, size):
        if self.offset + size > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated at byte {self.offset}")
        chunk = self.raw[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def text(self):
        return self.take(self.u32()).decode("utf-8")


def load(path):
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        reader = _Reader(f.read(), path)

    if reader.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not an RMA1 checkpoint")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")

    checkpoint = Checkpoint(tag=reader.text(), meta=decode_meta(reader.text()))
    for _ in range(reader.u32()):
        name = reader.text()
        ndim = reader.u32()
        shape = struct.unpack(f"<{ndim}Q", reader.take(8 * ndim)) if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(reader.take(8 * count), dtype="<f8").astype(np.float64)
        checkpoint.arrays[name] = data.reshape(shape)
    if reader.offset != len(reader.raw):
        raise CheckpointError(f"{path}: {len(reader.raw) - reader.offset} trailing bytes")
    return checkpoint
