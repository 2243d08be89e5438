"""Wire encodings shared by the server and the client.

HTTP API (all paths under ``/v1``)::

    GET  /config                       JSON {"segment_size", "block_size",
                                       "rebuild_threshold", "reverse_dedup"}
    POST /segments/query               body: concatenated 20-byte fingerprints
                                       response: existence bitmap, bit i of
                                       byte i//8 (LSB first) set iff stored
    PUT  /segments/<hex fp>            body: segment bytes followed by the block
                                       sidecar; header X-Sidecar-Length gives
                                       the sidecar size (0 = none)
                                       201 stored, 200 already stored,
                                       422 fingerprint mismatch, 400 malformed
    POST /vms/<vm>/versions            body: submission text (below)
                                       200 JSON ingest report; 409 missing or
                                       incomplete segments / version order
    GET  /vms/<vm>/versions/<n>        image bytes, Content-Length = logical
                                       length; a failed stream is truncated
    GET  /vms/<vm>/versions/<n>/stats  JSON read statistics
    GET  /vms                          JSON {vm: [version numbers]}

Block sidecar: one 21-byte record per block, ``u8 null flag`` then the
20-byte block fingerprint (zero bytes for null blocks).

Submission text, one item per line, ASCII::

    version next|<n>
    logical_length <bytes>
    segment_count <k>
    S <segment hex fp> <block 0> <block 1> ...      (k lines)

Each block entry is the 40-hex block fingerprint or ``-`` for a null block.
A segment line may omit its block list.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .chunking import FP_LEN, ZERO_FP

SIDECAR_RECORD = 1 + FP_LEN
API = "/v1"


class ProtocolError(ValueError):
    """Malformed request or response body."""


def encode_fps(fps) -> bytes:
    out = b"".join(fps)
    if len(out) != FP_LEN * len(fps):
        raise ProtocolError("fingerprints must be 20 bytes each")
    return out


def decode_fps(body: bytes) -> list[bytes]:
    if len(body) % FP_LEN:
        raise ProtocolError("fingerprint list length is not a multiple of 20")
    return [body[i:i + FP_LEN] for i in range(0, len(body), FP_LEN)]


def encode_bitmap(bits) -> bytes:
    bits = np.asarray(list(bits), dtype=bool)
    return np.packbits(bits, bitorder="little").tobytes()


def decode_bitmap(raw: bytes, count: int) -> list[bool]:
    if len(raw) != (count + 7) // 8:
        raise ProtocolError(f"bitmap of {len(raw)} bytes cannot hold {count} bits")
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")
    return bits[:count].astype(bool).tolist()


def encode_sidecar(nulls, fps: bytes) -> bytes:
    nulls = np.asarray(nulls, dtype=np.uint8)
    n = len(nulls)
    if len(fps) != n * FP_LEN:
        raise ProtocolError("fingerprint table does not match the null mask")
    rec = np.empty((n, SIDECAR_RECORD), dtype=np.uint8)
    rec[:, 0] = nulls
    rec[:, 1:] = np.frombuffer(fps, dtype=np.uint8).reshape(n, FP_LEN)
    return rec.tobytes()


def decode_sidecar(raw: bytes, block_count: int) -> tuple[np.ndarray, bytes]:
    if len(raw) != block_count * SIDECAR_RECORD:
        raise ProtocolError(f"sidecar must be {block_count * SIDECAR_RECORD} bytes, got {len(raw)}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(block_count, SIDECAR_RECORD)
    flags = rec[:, 0]
    if (flags > 1).any():
        raise ProtocolError("sidecar null flag must be 0 or 1")
    nulls = flags.astype(bool)
    fps = rec[:, 1:]
    if fps[nulls].any():
        raise ProtocolError("null blocks must carry a zero fingerprint")
    return nulls, np.ascontiguousarray(fps).tobytes()


@dataclass
class Submission:
    version_no: int | None  # None = next
    logical_length: int
    segment_fps: list[bytes]
    # segment fp -> (null mask, concatenated block fps), where provided
    block_tables: dict[bytes, tuple[np.ndarray, bytes]] = field(default_factory=dict)

    def encode(self) -> bytes:
        lines = [
            f"version {'next' if self.version_no is None else self.version_no}",
            f"logical_length {self.logical_length}",
            f"segment_count {len(self.segment_fps)}",
        ]
        for fp in self.segment_fps:
            tbl = self.block_tables.get(fp)
            if tbl is None:
                lines.append(f"S {fp.hex()}")
                continue
            nulls, fps = tbl
            parts = ["-" if n else fps[i * FP_LEN:(i + 1) * FP_LEN].hex()
                     for i, n in enumerate(np.asarray(nulls).tolist())]
            lines.append(f"S {fp.hex()} {' '.join(parts)}")
        return ("\n".join(lines) + "\n").encode("ascii")

    @classmethod
    def decode(cls, raw: bytes, blocks_per_segment: int | None = None) -> "Submission":
        try:
            text = raw.decode("ascii")
        except UnicodeDecodeError as exc:
            raise ProtocolError("submission must be ASCII") from exc
        lines = text.splitlines()
        if len(lines) < 3:
            raise ProtocolError("submission header is incomplete")
        header = {}
        for line in lines[:3]:
            key, _, value = line.partition(" ")
            header[key] = value.strip()
        try:
            v = header["version"]
            version_no = None if v == "next" else int(v)
            logical_length = int(header["logical_length"])
            count = int(header["segment_count"])
        except (KeyError, ValueError) as exc:
            raise ProtocolError(f"bad submission header: {exc}") from exc
        if version_no is not None and version_no < 1:
            raise ProtocolError("version must be positive")
        if logical_length <= 0 or count <= 0:
            raise ProtocolError("logical_length and segment_count must be positive")
        body = lines[3:]
        if len(body) != count:
            raise ProtocolError(f"expected {count} segment lines, got {len(body)}")
        sub = cls(version_no, logical_length, [])
        for line in body:
            parts = line.split()
            if len(parts) < 2 or parts[0] != "S":
                raise ProtocolError("segment lines start with 'S <fingerprint>'")
            fp = _hex_fp(parts[1])
            sub.segment_fps.append(fp)
            if len(parts) == 2:
                continue
            blocks = parts[2:]
            if blocks_per_segment is not None and len(blocks) != blocks_per_segment:
                raise ProtocolError(f"segment {parts[1]} lists {len(blocks)} blocks")
            nulls = np.array([b == "-" for b in blocks], dtype=bool)
            fps = b"".join(ZERO_FP if b == "-" else _hex_fp(b) for b in blocks)
            prior = sub.block_tables.get(fp)
            if prior is not None and (not np.array_equal(prior[0], nulls) or prior[1] != fps):
                raise ProtocolError(f"segment {parts[1]} listed with different blocks")
            sub.block_tables[fp] = (nulls, fps)
        return sub


def _hex_fp(text: str) -> bytes:
    if len(text) != 2 * FP_LEN:
        raise ProtocolError(f"not a fingerprint: {text[:48]!r}")
    try:
        return bytes.fromhex(text)
    except ValueError as exc:
        raise ProtocolError(f"not a fingerprint: {text[:48]!r}") from exc
