"""Backup and restore client.

A backup fingerprints the whole image first (segment and block
fingerprints), asks the server which segments it already holds, uploads the
rest over a few parallel connections and finally submits the version
metadata.  Re-running an interrupted backup re-queries and only uploads what
is still missing.

Two transports share this logic: :class:`HttpTransport` talks to a running
server, :class:`LocalTransport` drives a repository in-process.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests

from .chunking import ChunkParams, block_table, fingerprint, segment_count
from .errors import (
    IncompleteSegmentsError,
    IntegrityError,
    MissingSegmentsError,
    StoreError,
    UnknownVersionError,
    VersionOrderError,
)
from .protocol import API, Submission, decode_bitmap, encode_fps, encode_sidecar

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NETWORK = 3
EXIT_REJECTED = 4


class ClientError(Exception):
    exit_code = 1


class ValidationError(ClientError):
    exit_code = EXIT_VALIDATION


class NetworkError(ClientError):
    exit_code = EXIT_NETWORK


class RejectedError(ClientError):
    """The server refused a request; ``body`` is its reply, verbatim."""

    exit_code = EXIT_REJECTED

    def __init__(self, status: int, body: str, payload=None):
        self.status = status
        self.body = body
        self.payload = payload
        super().__init__(f"server rejected request ({status}): {body}")


# -- image sources ------------------------------------------------------


class ImageFile:
    """Random-access view of an image file."""

    def __init__(self, path):
        self.path = Path(path)
        self.fd = os.open(self.path, os.O_RDONLY)
        self.size = os.fstat(self.fd).st_size

    def pread(self, offset: int, length: int) -> bytes:
        return os.pread(self.fd, length, offset)

    def close(self) -> None:
        if self.fd >= 0:
            os.close(self.fd)
            self.fd = -1

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class BytesImage:
    def __init__(self, data):
        self.data = memoryview(data)
        self.size = len(self.data)

    def pread(self, offset: int, length: int) -> bytes:
        return bytes(self.data[offset:offset + length])


def read_segment(image, params: ChunkParams, ordinal: int) -> bytes:
    ss = params.segment_size
    off = ordinal * ss
    data = image.pread(off, min(ss, image.size - off))
    if len(data) < ss:
        data = bytes(data) + bytes(ss - len(data))
    return data


# -- planning -------------------------------------------------------------


@dataclass
class SegmentPlan:
    fingerprint: bytes
    nulls: np.ndarray
    block_fps: bytes
    exists: bool = False


@dataclass
class BackupPlan:
    logical_length: int
    params: ChunkParams
    segments: list[SegmentPlan]

    @property
    def segment_fps(self) -> list[bytes]:
        return [s.fingerprint for s in self.segments]

    def distinct(self) -> dict[bytes, list[int]]:
        """Fingerprint -> ordinals, in first-occurrence order."""
        out: dict[bytes, list[int]] = {}
        for i, s in enumerate(self.segments):
            out.setdefault(s.fingerprint, []).append(i)
        return out

    def to_submission(self, version_no: int | None = None) -> Submission:
        tables = {s.fingerprint: (s.nulls, s.block_fps) for s in self.segments}
        return Submission(version_no, self.logical_length, self.segment_fps, tables)


def plan_backup(image, params: ChunkParams, workers: int | None = None) -> BackupPlan:
    """Fingerprint every segment and block of ``image`` (the pre-pass)."""
    if image.size <= 0:
        raise ValidationError("image is empty")
    n = segment_count(image.size, params)
    workers = workers or os.cpu_count() or 1

    def one(i):
        data = read_segment(image, params, i)
        nulls, fps = block_table(data, params.block_size)
        return SegmentPlan(fingerprint(data), nulls, fps)

    if workers == 1:
        segs = [one(i) for i in range(n)]
    else:
        with ThreadPoolExecutor(workers) as pool:
            segs = list(pool.map(one, range(n)))
    return BackupPlan(image.size, params, segs)


@dataclass
class BackupSummary:
    vm_id: str
    version_no: int
    segments_total: int
    segments_distinct: int
    segments_uploaded: int
    bytes_uploaded: int
    bytes_sent: int
    logical_length: int
    seconds: dict[str, float] = field(default_factory=dict)
    report: dict = field(default_factory=dict)

    def to_text(self) -> str:
        keys = ("vm_id", "version_no", "segments_total", "segments_distinct",
                "segments_uploaded", "bytes_uploaded", "bytes_sent", "logical_length")
        lines = [f"{k}={getattr(self, k)}" for k in keys]
        lines += [f"seconds_{k}={v:.3f}" for k, v in self.seconds.items()]
        for k in ("blocks_redirected", "victims_removed", "victims_held"):
            if k in self.report:
                lines.append(f"{k}={self.report[k]}")
        mech = self.report.get("mechanisms", {})
        lines.append("mechanisms=" + ",".join(f"{k}:{v}" for k, v in sorted(mech.items())))
        return "\n".join(lines)


# -- transports -----------------------------------------------------------


class HttpTransport:
    def __init__(self, url: str, *, timeout: float = 600.0):
        self.url = url.rstrip("/")
        self.timeout = timeout
        self._local = threading.local()
        self.bytes_sent = 0
        self._lock = threading.Lock()

    @property
    def session(self) -> requests.Session:
        s = getattr(self._local, "session", None)
        if s is None:
            s = self._local.session = requests.Session()
        return s

    def _request(self, method: str, path: str, *, data=None, headers=None, stream=False, ok=(200,)):
        if data is not None:
            with self._lock:
                self.bytes_sent += len(data)
        try:
            r = self.session.request(method, self.url + API + path, data=data, headers=headers,
                                     stream=stream, timeout=self.timeout)
        except requests.RequestException as exc:
            raise NetworkError(f"{method} {path}: {exc}") from exc
        if r.status_code not in ok:
            body = r.text
            try:
                payload = r.json()
            except ValueError:
                payload = None
            self._raise(r.status_code, body, payload)
        return r

    @staticmethod
    def _raise(status: int, body: str, payload):
        if status == 409 and isinstance(payload, dict):
            if "incomplete" in payload:
                raise IncompleteSegmentsError([bytes.fromhex(h) for h in payload["incomplete"]])
            if "missing" in payload:
                raise MissingSegmentsError([bytes.fromhex(h) for h in payload["missing"]])
        raise RejectedError(status, body, payload)

    def config(self) -> dict:
        return self._request("GET", "/config").json()

    def query(self, fps: list[bytes]) -> list[bool]:
        r = self._request("POST", "/segments/query", data=encode_fps(fps))
        return decode_bitmap(r.content, len(fps))

    def put_segment(self, fp: bytes, data: bytes, nulls, block_fps: bytes) -> bool:
        sidecar = encode_sidecar(nulls, block_fps)
        r = self._request("PUT", f"/segments/{fp.hex()}", data=bytes(data) + sidecar,
                          headers={"X-Sidecar-Length": str(len(sidecar))}, ok=(200, 201))
        return r.status_code == 201

    def submit(self, vm_id: str, sub: Submission) -> dict:
        return self._request("POST", f"/vms/{vm_id}/versions", data=sub.encode()).json()

    def stats(self, vm_id: str, version_no: int) -> dict:
        return self._request("GET", f"/vms/{vm_id}/versions/{version_no}/stats").json()

    def list_vms(self) -> dict:
        return self._request("GET", "/vms").json()

    def restore(self, vm_id: str, version_no: int, sink) -> int:
        """Write the image to ``sink``; returns its length or raises."""
        r = self._request("GET", f"/vms/{vm_id}/versions/{version_no}", stream=True)
        expected = int(r.headers.get("Content-Length", -1))
        got = 0
        try:
            for chunk in r.iter_content(1 << 20):
                sink.write(chunk)
                got += len(chunk)
        except requests.RequestException as exc:
            raise NetworkError(f"restore of {vm_id} v{version_no} interrupted: {exc}") from exc
        finally:
            r.close()
        if got != expected:
            raise NetworkError(f"restore of {vm_id} v{version_no} truncated at {got} of {expected} bytes")
        return got


class LocalTransport:
    """Same interface as :class:`HttpTransport`, calling a repository directly."""

    def __init__(self, repo):
        self.repo = repo
        self.bytes_sent = 0
        self._lock = threading.Lock()

    def config(self) -> dict:
        p = self.repo.params
        return {"segment_size": p.segment_size, "block_size": p.block_size,
                "rebuild_threshold": self.repo.rebuild_threshold,
                "reverse_dedup": self.repo.reverse_dedup}

    def query(self, fps):
        return self.repo.query_exists(fps)

    def put_segment(self, fp, data, nulls, block_fps) -> bool:
        with self._lock:
            self.bytes_sent += len(data)
        try:
            res = self.repo.put_segment(fp, data, (nulls, block_fps))
        except IntegrityError as exc:
            raise RejectedError(422, str(exc)) from exc
        return res.created or res.revived

    def submit(self, vm_id: str, sub: Submission) -> dict:
        try:
            report = self.repo.ingest_version(vm_id, sub.version_no, sub.logical_length,
                                              sub.segment_fps, sub.block_tables)
        except MissingSegmentsError:
            raise
        except (VersionOrderError, IntegrityError, ValueError) as exc:
            raise RejectedError(409 if isinstance(exc, VersionOrderError) else 400, str(exc)) from exc
        return report.to_dict()

    def stats(self, vm_id: str, version_no: int) -> dict:
        from .readpath import read_stats
        try:
            return read_stats(self.repo, vm_id, version_no).to_dict()
        except UnknownVersionError as exc:
            raise RejectedError(404, str(exc)) from exc

    def list_vms(self) -> dict:
        return {vm: self.repo.versions(vm) for vm in self.repo.vms()}

    def restore(self, vm_id: str, version_no: int, sink) -> int:
        from .readpath import restore_stream
        try:
            stream = restore_stream(self.repo, vm_id, version_no)
        except UnknownVersionError as exc:
            raise RejectedError(404, str(exc)) from exc
        got = 0
        for chunk in stream:
            sink.write(chunk)
            got += len(chunk)
        return got


def connect(target) -> HttpTransport | LocalTransport:
    """A transport for a URL string, or pass a transport through."""
    if isinstance(target, str):
        return HttpTransport(target)
    return target


# -- operations -----------------------------------------------------------


def server_params(transport) -> ChunkParams:
    cfg = transport.config()
    return ChunkParams(int(cfg["segment_size"]), int(cfg["block_size"]))


def backup(image, vm_id: str, transport, *, params: ChunkParams | None = None,
           plan: BackupPlan | None = None, parallel: int = 4, workers: int | None = None,
           version_no: int | None = None, max_retries: int = 3) -> BackupSummary:
    """Back up ``image`` (an object with ``size`` and ``pread``) as a new version."""
    transport = connect(transport)
    remote = server_params(transport)
    if params is not None and params != remote:
        raise ValidationError(
            f"client chunking (segment {params.segment_size}, block {params.block_size}) "
            f"does not match the server (segment {remote.segment_size}, block {remote.block_size})")
    params = remote
    t0 = time.perf_counter()
    if plan is None:
        plan = plan_backup(image, params, workers)
    elif plan.params != params or plan.logical_length != image.size:
        raise ValidationError("backup plan does not match the image or the server")
    t1 = time.perf_counter()
    distinct = plan.distinct()
    fps = list(distinct)
    exists = transport.query(fps)
    for fp, e in zip(fps, exists):
        for i in distinct[fp]:
            plan.segments[i].exists = e
    todo = [fp for fp, e in zip(fps, exists) if not e]
    sent_before = getattr(transport, "bytes_sent", 0)
    uploaded = _upload(image, plan, transport, todo, distinct, parallel)
    t2 = time.perf_counter()
    sub = plan.to_submission(version_no)
    for attempt in range(max_retries + 1):
        try:
            report = transport.submit(vm_id, sub)
            break
        except MissingSegmentsError as exc:
            # segments lost blocks to removal (or vanished) since the query
            if attempt == max_retries:
                raise RejectedError(409, str(exc)) from exc
            again = [fp for fp in exc.fingerprints if fp in distinct]
            if len(again) != len(exc.fingerprints):
                raise RejectedError(409, str(exc)) from exc
            log.info("re-uploading %d segments named by the server", len(again))
            uploaded += _upload(image, plan, transport, again, distinct, parallel)
    t3 = time.perf_counter()
    sent = getattr(transport, "bytes_sent", 0) - sent_before
    return BackupSummary(
        vm_id=vm_id, version_no=report["version_no"], segments_total=len(plan.segments),
        segments_distinct=len(distinct), segments_uploaded=uploaded,
        bytes_uploaded=uploaded * params.segment_size, bytes_sent=sent,
        logical_length=plan.logical_length,
        seconds={"fingerprint": t1 - t0, "upload": t2 - t1, "submit": t3 - t2},
        report=report,
    )


def _upload(image, plan: BackupPlan, transport, todo, distinct, parallel: int) -> int:
    params = plan.params

    def one(fp):
        i = distinct[fp][0]
        data = read_segment(image, params, i)
        seg = plan.segments[i]
        transport.put_segment(fp, data, seg.nulls, seg.block_fps)
        return 1

    if not todo:
        return 0
    if parallel <= 1:
        return sum(one(fp) for fp in todo)
    with ThreadPoolExecutor(parallel) as pool:
        return sum(pool.map(one, todo))


def restore(vm_id: str, version_no: int, out_path, transport, *, force: bool = False) -> int:
    """Restore a version into ``out_path`` via ``<out_path>.partial``."""
    transport = connect(transport)
    out = Path(out_path)
    if out.exists() and not force:
        raise ValidationError(f"{out} exists; pass --force to overwrite")
    partial = out.with_name(out.name + ".partial")
    try:
        with open(partial, "wb") as f:
            n = transport.restore(vm_id, version_no, f)
            f.flush()
            os.fsync(f.fileno())
    except BaseException:
        partial.unlink(missing_ok=True)
        raise
    os.replace(partial, out)
    return n


def restore_to_bytes(vm_id: str, version_no: int, transport) -> bytes:
    import io
    buf = io.BytesIO()
    connect(transport).restore(vm_id, version_no, buf)
    return buf.getvalue()


def plan_to_json(plan: BackupPlan) -> str:
    """Compact summary of a plan for ``--fingerprint-only`` runs."""
    return json.dumps({
        "logical_length": plan.logical_length,
        "segment_size": plan.params.segment_size,
        "block_size": plan.params.block_size,
        "segments": len(plan.segments),
        "distinct_segments": len(plan.distinct()),
        "null_blocks": int(sum(int(s.nulls.sum()) for s in plan.segments)),
    })


__all__ = [
    "BackupPlan", "BackupSummary", "BytesImage", "ClientError", "HttpTransport", "ImageFile",
    "LocalTransport", "NetworkError", "RejectedError", "SegmentPlan", "StoreError",
    "ValidationError", "backup", "plan_backup", "restore", "restore_to_bytes",
]
