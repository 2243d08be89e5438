"""HTTP front end for a :class:`~revstore.dedup.Repository`.

See :mod:`revstore.protocol` for the endpoint shapes.  Requests are served
by a thread per connection; ingests of one VM are serialized by the
repository's per-VM lock, everything else runs in parallel.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
from dataclasses import asdict, dataclass
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .catalog import check_vm_id
from .chunking import ChunkParams, block_table, parse_size
from .dedup import Repository, stored_params
from .errors import (
    IncompleteSegmentsError,
    IntegrityError,
    MissingSegmentsError,
    ParamsMismatchError,
    UnknownVersionError,
    VersionOrderError,
)
from .protocol import API, ProtocolError, Submission, decode_fps, decode_sidecar, encode_bitmap
from .readpath import RestoreStream, read_stats

log = logging.getLogger(__name__)

ENV_PREFIX = "REVSTORE_"
MAX_SUBMISSION = 1 << 30
MAX_QUERY = 64 << 20

_SEGMENT_PATH = re.compile(rf"^{API}/segments/([0-9a-f]{{40}})$")
_VERSIONS_PATH = re.compile(rf"^{API}/vms/([^/]+)/versions$")
_VERSION_PATH = re.compile(rf"^{API}/vms/([^/]+)/versions/(\d+)(/stats)?$")


@dataclass
class ServerConfig:
    store_root: str = "./store"
    listen_address: str = "127.0.0.1:8470"
    segment_size: int | None = None  # None: stored value, else 4 MiB
    block_size: int | None = None
    rebuild_threshold: float = 0.2
    pipeline_depth: int = 1024
    reverse_dedup: bool = True
    durable: bool = True

    @classmethod
    def from_env(cls, env=None, **overrides) -> "ServerConfig":
        """Defaults, then ``REVSTORE_*`` variables, then non-None ``overrides``."""
        env = os.environ if env is None else env
        cfg = cls()
        conv = {
            "store_root": str, "listen_address": str, "segment_size": parse_size,
            "block_size": parse_size, "rebuild_threshold": float, "pipeline_depth": int,
            "reverse_dedup": _parse_bool, "durable": _parse_bool,
        }
        names = {"store_root": "STORE", "listen_address": "LISTEN"}
        for key, fn in conv.items():
            raw = env.get(ENV_PREFIX + names.get(key, key.upper()))
            if raw not in (None, ""):
                setattr(cfg, key, fn(raw))
        for key, value in overrides.items():
            if value is not None:
                setattr(cfg, key, value)
        return cfg

    def chunk_params(self) -> ChunkParams:
        """Chunk parameters, reconciled with an existing store."""
        stored = stored_params(self.store_root)
        if stored is None:
            defaults = ChunkParams()
            return ChunkParams(self.segment_size or defaults.segment_size,
                               self.block_size or defaults.block_size)
        want = ChunkParams(self.segment_size or stored.segment_size,
                           self.block_size or stored.block_size)
        if want != stored:
            raise ParamsMismatchError(
                f"store at {self.store_root} uses segment_size={stored.segment_size} "
                f"block_size={stored.block_size}")
        return stored

    def address(self) -> tuple[str, int]:
        host, _, port = self.listen_address.rpartition(":")
        return host or "127.0.0.1", int(port)


def _parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


class RevStoreServer(ThreadingHTTPServer):
    daemon_threads = True
    request_queue_size = 64

    def __init__(self, config: ServerConfig, repo: Repository | None = None):
        self.config = config
        if repo is None:
            repo = Repository(config.store_root, config.chunk_params(),
                              rebuild_threshold=config.rebuild_threshold,
                              reverse_dedup=config.reverse_dedup, durable=config.durable)
        self.repo = repo
        super().__init__(config.address(), RequestHandler)

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name="revstore-server", daemon=True)
        t.start()
        return t

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


class RequestHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: RevStoreServer

    def log_message(self, fmt, *args):
        log.debug("%s - %s", self.address_string(), fmt % args)

    # -- plumbing ------------------------------------------------------

    def _body(self, limit: int) -> bytes:
        self._consumed = True
        if self.headers.get("Transfer-Encoding"):
            raise ProtocolError("chunked request bodies are not supported")
        try:
            n = int(self.headers.get("Content-Length", "0"))
        except ValueError as exc:
            raise ProtocolError("bad Content-Length") from exc
        if n < 0 or n > limit:
            self.close_connection = True
            raise ProtocolError(f"request body of {n} bytes exceeds the limit of {limit}")
        data = self.rfile.read(n)
        if len(data) != n:
            self.close_connection = True
            raise ProtocolError("request body truncated")
        return data

    def _send(self, status: int, body: bytes = b"", ctype: str = "application/octet-stream") -> None:
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        if self.close_connection:
            self.send_header("Connection", "close")
        self.end_headers()
        if body and self.command != "HEAD":
            self.wfile.write(body)

    def _json(self, status: int, obj) -> None:
        self._send(status, json.dumps(obj).encode(), "application/json")

    def _error(self, status: int, message: str, **extra) -> None:
        if not getattr(self, "_consumed", True):
            # the request body is still on the wire
            self.close_connection = True
        self._json(status, {"error": message, **extra})

    def _dispatch(self, fn, *args) -> None:
        self._consumed = self.command == "GET"
        try:
            fn(*args)
        except (ProtocolError, ValueError, IndexError) as exc:
            self._error(HTTPStatus.BAD_REQUEST, str(exc))
        except IncompleteSegmentsError as exc:
            self._error(HTTPStatus.CONFLICT, "incomplete segments",
                        incomplete=[fp.hex() for fp in exc.fingerprints])
        except MissingSegmentsError as exc:
            self._error(HTTPStatus.CONFLICT, "missing segments",
                        missing=[fp.hex() for fp in exc.fingerprints])
        except VersionOrderError as exc:
            self._error(HTTPStatus.CONFLICT, str(exc), kind="version_order")
        except IntegrityError as exc:
            self._error(HTTPStatus.UNPROCESSABLE_ENTITY, str(exc))
        except UnknownVersionError as exc:
            self._error(HTTPStatus.NOT_FOUND, str(exc))
        except (BrokenPipeError, ConnectionResetError):
            self.close_connection = True
        except Exception as exc:  # pragma: no cover - surfaced to the client
            log.exception("request failed")
            self.close_connection = True
            self._error(HTTPStatus.INTERNAL_SERVER_ERROR, f"{type(exc).__name__}: {exc}")

    # -- routes --------------------------------------------------------

    def do_GET(self):
        path = self.path.split("?", 1)[0]
        if path == f"{API}/config":
            return self._dispatch(self._config)
        if path == f"{API}/vms":
            return self._dispatch(self._list_vms)
        m = _VERSION_PATH.match(path)
        if m:
            fn = self._stats if m.group(3) else self._restore
            return self._dispatch(fn, m.group(1), int(m.group(2)))
        self._error(HTTPStatus.NOT_FOUND, "no such endpoint")

    def do_POST(self):
        path = self.path.split("?", 1)[0]
        if path == f"{API}/segments/query":
            return self._dispatch(self._query)
        m = _VERSIONS_PATH.match(path)
        if m:
            return self._dispatch(self._submit, m.group(1))
        self._drain()
        self._error(HTTPStatus.NOT_FOUND, "no such endpoint")

    def do_PUT(self):
        m = _SEGMENT_PATH.match(self.path.split("?", 1)[0])
        if m:
            return self._dispatch(self._upload, bytes.fromhex(m.group(1)))
        self._drain()
        self._error(HTTPStatus.NOT_FOUND, "no such endpoint")

    def _drain(self) -> None:
        try:
            self._body(self._upload_limit())
        except ProtocolError:
            self.close_connection = True

    def _upload_limit(self) -> int:
        p = self.server.repo.params
        return p.segment_size + p.blocks_per_segment * 21

    # -- handlers ------------------------------------------------------

    def _config(self):
        repo = self.server.repo
        self._json(HTTPStatus.OK, {
            "segment_size": repo.params.segment_size,
            "block_size": repo.params.block_size,
            "rebuild_threshold": repo.rebuild_threshold,
            "reverse_dedup": repo.reverse_dedup,
        })

    def _list_vms(self):
        repo = self.server.repo
        self._json(HTTPStatus.OK, {vm: repo.versions(vm) for vm in repo.vms()})

    def _query(self):
        fps = decode_fps(self._body(MAX_QUERY))
        self._send(HTTPStatus.OK, encode_bitmap(self.server.repo.query_exists(fps)))

    def _upload(self, fp: bytes):
        repo = self.server.repo
        params = repo.params
        body = self._body(self._upload_limit())
        try:
            side_len = int(self.headers.get("X-Sidecar-Length", "0"))
        except ValueError as exc:
            raise ProtocolError("bad X-Sidecar-Length") from exc
        if side_len < 0 or len(body) - side_len != params.segment_size:
            raise ProtocolError(f"segment body must be {params.segment_size} bytes")
        data = memoryview(body)[:params.segment_size]
        nulls, fps = block_table(data, params.block_size)
        if side_len:
            c_nulls, c_fps = decode_sidecar(bytes(body[params.segment_size:]), params.blocks_per_segment)
            if not (c_nulls == nulls).all() or c_fps != fps:
                raise IntegrityError(f"block descriptors do not match the content of {fp.hex()}")
        res = repo.put_segment(fp, data, (nulls, fps))
        status = HTTPStatus.CREATED if res.created or res.revived else HTTPStatus.OK
        self._json(status, {"segment_id": res.segment_id, "created": res.created, "revived": res.revived})

    def _submit(self, vm_id: str):
        repo = self.server.repo
        raw = self._body(MAX_SUBMISSION)
        check_vm_id(vm_id)
        sub = Submission.decode(raw, repo.params.blocks_per_segment)
        report = repo.ingest_version(vm_id, sub.version_no, sub.logical_length,
                                     sub.segment_fps, sub.block_tables)
        self._json(HTTPStatus.OK, report.to_dict())

    def _stats(self, vm_id: str, n: int):
        check_vm_id(vm_id)
        self._json(HTTPStatus.OK, read_stats(self.server.repo, vm_id, n).to_dict())

    def _restore(self, vm_id: str, n: int):
        check_vm_id(vm_id)
        stream = RestoreStream(self.server.repo, vm_id, n, depth=self.server.config.pipeline_depth)
        self.send_response(HTTPStatus.OK)
        self.send_header("Content-Type", "application/octet-stream")
        self.send_header("Content-Length", str(stream.logical_length))
        self.end_headers()
        try:
            for chunk in stream:
                self.wfile.write(chunk)
        except (BrokenPipeError, ConnectionResetError):
            self.close_connection = True
        except Exception:
            # headers are gone; the short body tells the client it failed
            log.exception("restore of %s v%d failed mid-stream", vm_id, n)
            self.close_connection = True


def make_server(config: ServerConfig, repo: Repository | None = None) -> RevStoreServer:
    return RevStoreServer(config, repo)


def serve(config: ServerConfig) -> None:
    srv = make_server(config)
    log.info("serving %s on %s (%s)", config.store_root, srv.url, asdict(config))
    print(f"revstore serving {config.store_root} at {srv.url}", flush=True)
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        srv.server_close()
