"""Version recipes, block pointer tables and the store catalog.

Files under ``<root>``::

    catalog.json              store catalog (see Catalog)
    vms/<vm>/<n>.recipe       JSON: version_no, logical_length, segment fps (hex)
    vms/<vm>/<n>.ptr          pointer table, one record per logical block

POINTER TABLE FORMAT (little endian)::

    header, 16 bytes: magic b"RVPT", u16 format version (1), u16 reserved,
                      u64 record count
    records, 17 bytes each: u8 tag, u64 a, u64 b
        tag 0  Null
        tag 1  Direct    a = segment ordinal in the recipe, b = block index
        tag 2  Indirect  a = target version number, b = target block ordinal
"""

from __future__ import annotations

import json
import os
import re
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .chunking import ChunkParams
from .errors import CorruptionError, ParamsMismatchError, UnknownVersionError

PTR_MAGIC = b"RVPT"
PTR_VERSION = 1
PTR_HEADER = struct.Struct("<4sHHQ")
PTR_DTYPE = np.dtype([("tag", "u1"), ("a", "<u8"), ("b", "<u8")])

TAG_NULL = 0
TAG_DIRECT = 1
TAG_INDIRECT = 2

CATALOG_FORMAT = 1
_VM_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]{0,63}$")


@dataclass(frozen=True)
class Direct:
    segment_ordinal: int
    block_index: int


@dataclass(frozen=True)
class Indirect:
    target_version: int
    target_ordinal: int


@dataclass(frozen=True)
class Null:
    pass


NULL = Null()
BlockPointer = Direct | Indirect | Null


def pointer_at(table: np.ndarray, i: int) -> BlockPointer:
    tag, a, b = table["tag"][i], int(table["a"][i]), int(table["b"][i])
    if tag == TAG_DIRECT:
        return Direct(a, b)
    if tag == TAG_INDIRECT:
        return Indirect(a, b)
    if tag == TAG_NULL:
        return NULL
    raise CorruptionError(f"unknown pointer tag {tag}")


def check_vm_id(vm_id: str) -> str:
    if not isinstance(vm_id, str) or not _VM_RE.match(vm_id):
        raise ValueError(f"invalid vm id: {vm_id!r}")
    return vm_id


def encode_pointer_table(table: np.ndarray) -> bytes:
    return PTR_HEADER.pack(PTR_MAGIC, PTR_VERSION, 0, len(table)) + table.tobytes()


def decode_pointer_table(raw) -> np.ndarray:
    if len(raw) < PTR_HEADER.size:
        raise CorruptionError("truncated pointer table")
    magic, version, _, count = PTR_HEADER.unpack_from(raw)
    if magic != PTR_MAGIC or version != PTR_VERSION:
        raise CorruptionError("bad pointer table header")
    body = memoryview(raw)[PTR_HEADER.size:]
    if len(body) != count * PTR_DTYPE.itemsize:
        raise CorruptionError("pointer table length mismatch")
    return np.frombuffer(body, dtype=PTR_DTYPE)


@dataclass
class VersionRecipe:
    vm_id: str
    version_no: int
    logical_length: int
    segment_fps: list[bytes]
    pointer_table: np.ndarray | None = field(default=None, repr=False)

    def to_json(self) -> str:
        return json.dumps({
            "vm_id": self.vm_id,
            "version_no": self.version_no,
            "logical_length": self.logical_length,
            "segments": [fp.hex() for fp in self.segment_fps],
        })

    @classmethod
    def from_json(cls, text: str) -> "VersionRecipe":
        d = json.loads(text)
        return cls(d["vm_id"], d["version_no"], d["logical_length"],
                   [bytes.fromhex(h) for h in d["segments"]])


class Catalog:
    """Registry of VMs, their version chains and store-wide counters.

    ``catalog.json`` holds ``{"format": 1, "segment_size", "block_size",
    "placement_counter", "commit_counter", "vms": {vm: {"latest": n,
    "versions": {n: logical_length}}}}`` and is replaced atomically on every
    commit.
    """

    def __init__(self, root, params: ChunkParams, durable: bool = True):
        self.root = Path(root)
        self.path = self.root / "catalog.json"
        self.durable = durable
        self._lock = threading.RLock()
        if self.path.exists():
            d = json.loads(self.path.read_text())
            if d.get("format") != CATALOG_FORMAT:
                raise CorruptionError(f"unsupported catalog format {d.get('format')}")
            stored = ChunkParams(d["segment_size"], d["block_size"])
            if stored != params:
                raise ParamsMismatchError(
                    f"store was created with segment_size={stored.segment_size} "
                    f"block_size={stored.block_size}"
                )
            self.placement_counter = d["placement_counter"]
            self.commit_counter = d["commit_counter"]
            self.vms = {vm: {"latest": v["latest"],
                             "versions": {int(k): n for k, n in v["versions"].items()}}
                        for vm, v in d["vms"].items()}
        else:
            self.root.mkdir(parents=True, exist_ok=True)
            self.placement_counter = 0
            self.commit_counter = 0
            self.vms = {}
        self.params = params
        if not self.path.exists():
            self.save()

    def save(self) -> None:
        with self._lock:
            d = {
                "format": CATALOG_FORMAT,
                "segment_size": self.params.segment_size,
                "block_size": self.params.block_size,
                "placement_counter": self.placement_counter,
                "commit_counter": self.commit_counter,
                "vms": self.vms,
            }
            tmp = self.path.with_name("catalog.json.tmp")
            with open(tmp, "w") as f:
                json.dump(d, f, sort_keys=True)
                if self.durable:
                    f.flush()
                    os.fsync(f.fileno())
            os.replace(tmp, self.path)

    def next_placement(self) -> int:
        with self._lock:
            self.placement_counter += 1
            return self.placement_counter

    def latest(self, vm_id: str) -> int:
        v = self.vms.get(vm_id)
        return v["latest"] if v else 0

    def versions(self, vm_id: str) -> list[int]:
        v = self.vms.get(vm_id)
        return sorted(v["versions"]) if v else []

    def has_version(self, vm_id: str, version_no: int) -> bool:
        v = self.vms.get(vm_id)
        return bool(v) and version_no in v["versions"]

    def commit(self, vm_id: str, version_no: int, logical_length: int) -> None:
        with self._lock:
            v = self.vms.setdefault(vm_id, {"latest": 0, "versions": {}})
            v["versions"][version_no] = logical_length
            v["latest"] = version_no
            self.commit_counter += 1
            self.save()

    # -- per-version files ---------------------------------------------

    def vm_dir(self, vm_id: str) -> Path:
        return self.root / "vms" / check_vm_id(vm_id)

    def recipe_path(self, vm_id: str, n: int) -> Path:
        return self.vm_dir(vm_id) / f"{n}.recipe"

    def table_path(self, vm_id: str, n: int) -> Path:
        return self.vm_dir(vm_id) / f"{n}.ptr"

    def write_version_files(self, recipe: VersionRecipe) -> None:
        d = self.vm_dir(recipe.vm_id)
        d.mkdir(parents=True, exist_ok=True)
        self._atomic_write(self.recipe_path(recipe.vm_id, recipe.version_no),
                           recipe.to_json().encode())
        self.write_table(recipe.vm_id, recipe.version_no, recipe.pointer_table)

    def write_table(self, vm_id: str, n: int, table: np.ndarray) -> None:
        self._atomic_write(self.table_path(vm_id, n), encode_pointer_table(table))

    def _atomic_write(self, path: Path, raw: bytes) -> None:
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as f:
            f.write(raw)
            if self.durable:
                f.flush()
                os.fsync(f.fileno())
        os.replace(tmp, path)

    def load_recipe(self, vm_id: str, n: int, *, with_table: bool = True) -> VersionRecipe:
        if not self.has_version(vm_id, n):
            raise UnknownVersionError(f"{vm_id} version {n}")
        recipe = VersionRecipe.from_json(self.recipe_path(vm_id, n).read_text())
        if with_table:
            recipe.pointer_table = self.load_table(vm_id, n)
        return recipe

    def load_table(self, vm_id: str, n: int) -> np.ndarray:
        return decode_pointer_table(self.table_path(vm_id, n).read_bytes())
