from __future__ import annotations

import threading

import numpy as np
import pytest
import requests
from conftest import blocks_from_letters, check_store, random_blocks
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from revstore import cli
from revstore.chunking import ChunkParams, block_table, fingerprint
from revstore.client import (
    BytesImage,
    HttpTransport,
    NetworkError,
    RejectedError,
    ValidationError,
    backup,
    restore,
    restore_to_bytes,
)
from revstore.errors import ParamsMismatchError
from revstore.protocol import encode_sidecar
from revstore.server import ServerConfig, make_server

BS = 512
P = ChunkParams(4 * BS, BS)


@pytest.fixture
def server(tmp_path):
    cfg = ServerConfig(store_root=str(tmp_path / "store"), listen_address="127.0.0.1:0",
                       segment_size=P.segment_size, block_size=P.block_size, durable=False)
    srv = make_server(cfg)
    srv.start_background()
    yield srv
    srv.stop()


def put_raw(srv, fp_hex, body, sidecar_len=0):
    return requests.put(f"{srv.url}/v1/segments/{fp_hex}", data=body,
                        headers={"X-Sidecar-Length": str(sidecar_len)})


def test_config_and_query(server):
    t = HttpTransport(server.url)
    assert t.config()["segment_size"] == P.segment_size
    data = blocks_from_letters("ABCD", BS)
    fp = fingerprint(data)
    assert t.query([fp, fingerprint(b"x")]) == [False, False]
    nulls, fps = block_table(data, BS)
    assert t.put_segment(fp, data, nulls, fps) is True
    assert t.put_segment(fp, data, nulls, fps) is False
    assert t.query([fp, fingerprint(b"x")]) == [True, False]


def test_tampered_segment_rejected(server):
    data = bytearray(blocks_from_letters("ABCD", BS))
    fp = fingerprint(bytes(data))
    data[5] ^= 1
    r = put_raw(server, fp.hex(), bytes(data))
    assert r.status_code == 422
    # honest content with a lying sidecar
    good = blocks_from_letters("ABCD", BS)
    nulls, fps = block_table(good, BS)
    side = encode_sidecar(nulls, fps[:-1] + b"\x00")
    r = put_raw(server, fp.hex(), good + side, len(side))
    assert r.status_code == 422
    assert fp not in server.repo.store


def test_wrong_length_rejected(server):
    data = blocks_from_letters("ABC", BS)
    r = put_raw(server, fingerprint(data).hex(), data)
    assert r.status_code == 400
    r = requests.put(f"{server.url}/v1/segments/nothex", data=b"x")
    assert r.status_code == 404


def test_error_keeps_connection_usable(server):
    s = requests.Session()
    r = s.put(f"{server.url}/v1/segments/{'ab' * 20}", data=b"x" * 10)
    assert r.status_code == 400
    r = s.post(f"{server.url}/v1/vms/bad%2Fvm/versions", data=b"junk")
    assert r.status_code in (400, 404)
    assert s.get(f"{server.url}/v1/config").status_code == 200


def test_not_found(server):
    t = HttpTransport(server.url)
    with pytest.raises(RejectedError) as ei:
        restore_to_bytes("vm", 1, t)
    assert ei.value.status == 404
    assert requests.get(f"{server.url}/v1/nope").status_code == 404
    assert requests.get(f"{server.url}/v1/vms/vm/versions/1/stats").status_code == 404


def test_backup_restore_and_stats(server, tmp_path):
    rng = np.random.default_rng(1)
    a = random_blocks(rng, 30, BS) + bytes(8 * BS) + b"end"
    b = a[:10 * BS] + random_blocks(rng, 3, BS) + a[13 * BS:]
    s1 = backup(BytesImage(a), "vm", server.url, parallel=2)
    s2 = backup(BytesImage(b), "vm", server.url, parallel=2)
    assert (s1.version_no, s2.version_no) == (1, 2)
    assert s2.segments_uploaded < s2.segments_distinct
    t = HttpTransport(server.url)
    assert restore_to_bytes("vm", 1, t) == a
    assert restore_to_bytes("vm", 2, t) == b
    assert t.stats("vm", 2)["indirect_pointers"] == 0
    assert t.list_vms() == {"vm": [1, 2]}
    out = tmp_path / "out.img"
    restore("vm", 1, out, t)
    assert out.read_bytes() == a
    with pytest.raises(ValidationError):
        restore("vm", 2, out, t)
    restore("vm", 2, out, t, force=True)
    assert out.read_bytes() == b
    assert not (tmp_path / "out.img.partial").exists()


def test_version_order_conflict(server):
    data = blocks_from_letters("ABCD", BS)
    backup(BytesImage(data), "vm", server.url)
    with pytest.raises(RejectedError) as ei:
        backup(BytesImage(data), "vm", server.url, version_no=5)
    assert ei.value.status == 409


class DroppingTransport(HttpTransport):
    """Silently loses the first upload of chosen segments."""

    def __init__(self, url, drop):
        super().__init__(url)
        self.drop = set(drop)
        self.puts = []

    def put_segment(self, fp, data, nulls, block_fps):
        self.puts.append(fp)
        if fp in self.drop:
            self.drop.discard(fp)
            return True
        return super().put_segment(fp, data, nulls, block_fps)


def test_client_reuploads_missing_segments(server):
    data = blocks_from_letters("ABCDEFGHIJKL", BS)
    lost = fingerprint(blocks_from_letters("EFGH", BS))
    t = DroppingTransport(server.url, [lost])
    s = backup(BytesImage(data), "vm", t, parallel=1)
    assert s.segments_uploaded == 4 and t.puts.count(lost) == 2
    assert restore_to_bytes("vm", 1, t) == data


def test_resumed_backup_skips_stored_segments(server):
    data = blocks_from_letters("ABCDEFGHIJKL", BS)
    t = HttpTransport(server.url)
    first = data[:4 * BS]
    nulls, fps = block_table(first, BS)
    t.put_segment(fingerprint(first), first, nulls, fps)  # an earlier attempt got this far
    s = backup(BytesImage(data), "vm", t)
    assert s.segments_uploaded == 2


def test_shared_segment_removals_over_http(server):
    reports = []
    for vm, letters in (("vma", "ABCDEFGH"), ("vmb", "ABCDEFGH"), ("vma", "ABCdEfGH"), ("vmb", "ABCdexGh")):
        reports.append(backup(BytesImage(blocks_from_letters(letters, BS)), vm, server.url).report)
    abcd = fingerprint(blocks_from_letters("ABCD", BS)).hex()
    rem = {r["segment"]: r["blocks_removed"] for r in reports[-1]["removals"]}
    assert rem[abcd] == 3  # A, B and C; D is still referenced twice


def test_eight_concurrent_clients(server):
    rng = np.random.default_rng(8)
    base = random_blocks(rng, 32, BS)
    images = {}
    errors = []

    def client(i):
        try:
            cur = bytearray(base)
            for v in range(1, 4):
                at = int(rng.integers(0, 32)) * BS
                cur[at:at + BS] = bytes([i + 1]) * BS
                data = bytes(cur)
                images[(f"vm{i}", v)] = data
                backup(BytesImage(data), f"vm{i}", server.url, parallel=2)
        except Exception as exc:  # pragma: no cover
            errors.append(exc)

    threads = [threading.Thread(target=client, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    check_store(server.repo, images)


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.binary(max_size=300))
def test_fuzzed_submissions_never_crash(server, body):
    r = requests.post(f"{server.url}/v1/vms/fuzz/versions", data=body)
    assert r.status_code in (400, 409)
    assert requests.get(f"{server.url}/v1/config").status_code == 200


def test_config_precedence(tmp_path):
    env = {"REVSTORE_STORE": "/a", "REVSTORE_LISTEN": "0.0.0.0:1", "REVSTORE_REBUILD_THRESHOLD": "0.5",
           "REVSTORE_SEGMENT_SIZE": "8M", "REVSTORE_REVERSE_DEDUP": "no"}
    cfg = ServerConfig.from_env(env, store_root="/b", rebuild_threshold=None)
    assert cfg.store_root == "/b" and cfg.rebuild_threshold == 0.5
    assert cfg.segment_size == 8 << 20 and cfg.reverse_dedup is False
    assert cfg.address() == ("0.0.0.0", 1)
    assert ServerConfig.from_env({}).listen_address == "127.0.0.1:8470"


def test_stored_params_win(tmp_path):
    cfg = ServerConfig(store_root=str(tmp_path), listen_address="127.0.0.1:0",
                       segment_size=P.segment_size, block_size=P.block_size, durable=False)
    make_server(cfg).server_close()
    reopened = ServerConfig(store_root=str(tmp_path))
    assert reopened.chunk_params() == P
    with pytest.raises(ParamsMismatchError):
        ServerConfig(store_root=str(tmp_path), segment_size=8 * BS).chunk_params()


def test_cli_exit_codes(server, tmp_path, capsys):
    img = tmp_path / "img"
    img.write_bytes(blocks_from_letters("ABCDEF", BS))
    assert cli.main(["backup", "--vm", "c", "--image", str(img), "--server", server.url]) == 0
    assert "version_no=1" in capsys.readouterr().out
    assert cli.main(["backup", "--vm", "c", "--image", str(tmp_path / "nope"), "--server", server.url]) == 2
    assert cli.main(["backup", "--vm", "c", "--image", str(img), "--server", "http://127.0.0.1:9"]) == 3
    out = tmp_path / "r"
    args = ["restore", "--vm", "c", "--version", "1", "--out", str(out), "--server", server.url]
    assert cli.main(args) == 0 and out.read_bytes() == img.read_bytes()
    assert cli.main(args) == 2
    assert cli.main(args + ["--force"]) == 0
    assert cli.main(["restore", "--vm", "c", "--version", "9", "--out", str(tmp_path / "x"),
                     "--server", server.url]) == 4
    assert cli.main(["backup", "--vm", "c", "--image", str(img), "--fingerprint-only",
                     "--segment-size", str(P.segment_size), "--block-size", str(BS)]) == 0
    assert '"segments": 2' in capsys.readouterr().out
    assert cli.main(["fsck", "--store", str(server.repo.root)]) == 0
    assert cli.main(["fsck", "--store", str(tmp_path / "empty")]) == 2


def test_network_error_type():
    with pytest.raises(NetworkError):
        HttpTransport("http://127.0.0.1:9").config()
