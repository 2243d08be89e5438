"""Fixed-size chunking, SHA-1 fingerprints and null-block detection.

A fingerprint is the raw 20-byte SHA-1 digest (``bytes``).  The final
partial segment of a stream is zero padded to the full segment size; the
logical length is kept separately so a restore can truncate.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

MiB = 1 << 20
KiB = 1 << 10
FP_LEN = 20
ZERO_FP = bytes(FP_LEN)

_SIZE_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([kmgt]?)(i?b)?\s*$", re.IGNORECASE)
_SIZE_UNITS = {"": 1, "k": KiB, "m": MiB, "g": 1 << 30, "t": 1 << 40}


def parse_size(text) -> int:
    """Parse ``"4M"``, ``"128KiB"``, ``"4096"`` etc. (binary units)."""
    if isinstance(text, int):
        return text
    m = _SIZE_RE.match(str(text))
    if not m:
        raise ValueError(f"bad size: {text!r}")
    value = float(m.group(1)) * _SIZE_UNITS[m.group(2).lower()]
    if value != int(value):
        raise ValueError(f"size is not a whole number of bytes: {text!r}")
    return int(value)


def format_size(n: int) -> str:
    for unit, scale in (("G", 1 << 30), ("M", MiB), ("K", KiB)):
        if n >= scale and n % scale == 0:
            return f"{n // scale}{unit}"
    return str(n)


@dataclass(frozen=True)
class ChunkParams:
    segment_size: int = 4 * MiB
    block_size: int = 4096

    def __post_init__(self):
        bs, ss = self.block_size, self.segment_size
        if bs < 512 or bs % 8:
            raise ValueError(f"block_size must be >= 512 and a multiple of 8, got {bs}")
        if ss <= 0 or ss % bs:
            raise ValueError("segment_size must be a positive multiple of block_size")
        ratio = ss // bs
        if ratio & (ratio - 1):
            raise ValueError("segment_size / block_size must be a power of two")

    @property
    def blocks_per_segment(self) -> int:
        return self.segment_size // self.block_size


@dataclass(frozen=True)
class BlockDescriptor:
    fingerprint: bytes | None
    is_null: bool


def fingerprint(data) -> bytes:
    return hashlib.sha1(data).digest()


def segment_count(length: int, params: ChunkParams) -> int:
    return math.ceil(length / params.segment_size)


def split_segments(stream: bytes, params: ChunkParams) -> list[bytes]:
    """Split an in-memory stream into padded segments.

    Use :func:`iter_segments` for images that do not fit in memory.
    """
    if len(stream) == 0:
        raise ValueError("cannot chunk an empty stream")
    ss = params.segment_size
    out = []
    for off in range(0, len(stream), ss):
        seg = stream[off:off + ss]
        if len(seg) < ss:
            seg = bytes(seg) + bytes(ss - len(seg))
        out.append(bytes(seg))
    return out


def iter_segments(image, params: ChunkParams) -> Iterator[bytes]:
    """Yield padded segments from an object with ``size`` and ``pread``."""
    size = image.size
    if size <= 0:
        raise ValueError("cannot chunk an empty stream")
    ss = params.segment_size
    for off in range(0, size, ss):
        seg = image.pread(off, min(ss, size - off))
        if len(seg) < ss:
            seg = bytes(seg) + bytes(ss - len(seg))
        yield seg


def null_mask(segment, block_size: int) -> np.ndarray:
    """Boolean array, True where the block is entirely zero (full scan)."""
    words = np.frombuffer(segment, dtype=np.uint64)
    return ~words.reshape(-1, block_size // 8).any(axis=1)


def block_table(segment, block_size: int) -> tuple[np.ndarray, bytes]:
    """Null mask plus the concatenated block fingerprints.

    Null blocks get the all-zero placeholder in the fingerprint string; they
    are never hashed.
    """
    nulls = null_mask(segment, block_size)
    mv = memoryview(segment)
    sha1 = hashlib.sha1
    parts = []
    for i, is_null in enumerate(nulls.tolist()):
        if is_null:
            parts.append(ZERO_FP)
        else:
            off = i * block_size
            parts.append(sha1(mv[off:off + block_size]).digest())
    return nulls, b"".join(parts)


def describe_blocks(segment, params: ChunkParams) -> list[BlockDescriptor]:
    if len(segment) != params.segment_size:
        raise ValueError(
            f"segment length {len(segment)} != segment_size {params.segment_size}"
        )
    nulls, fps = block_table(segment, params.block_size)
    return descriptors_from_table(nulls, fps)


def descriptors_from_table(nulls, fps: bytes) -> list[BlockDescriptor]:
    return [
        BlockDescriptor(None, True) if n
        else BlockDescriptor(fps[i * FP_LEN:(i + 1) * FP_LEN], False)
        for i, n in enumerate(np.asarray(nulls).tolist())
    ]


def table_from_descriptors(blocks: Iterable[BlockDescriptor]) -> tuple[np.ndarray, bytes]:
    blocks = list(blocks)
    nulls = np.array([b.is_null for b in blocks], dtype=bool)
    fps = b"".join(ZERO_FP if b.is_null else b.fingerprint for b in blocks)
    return nulls, fps
