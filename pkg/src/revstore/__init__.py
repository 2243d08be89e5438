"""Deduplicating backup store for versioned VM images.

Segments are deduplicated globally on write; afterwards, duplicate blocks of
the previous version of the same VM are removed and redirected to the new
version, so the newest backup is always stored sequentially.
"""

from .chunking import ChunkParams, describe_blocks, fingerprint, split_segments
from .dedup import IngestReport, Repository, reverse_deduplicate
from .readpath import read_stats, resolve_block, restore_bytes, restore_stream

__version__ = "0.1.0"

__all__ = [
    "ChunkParams", "IngestReport", "Repository", "describe_blocks", "fingerprint", "read_stats",
    "resolve_block", "restore_bytes", "restore_stream", "reverse_deduplicate", "split_segments",
]
