"""Persistent, semantically named dataset store with an append-only journal.

On-disk layout of a store directory::

    manifest.tsv      one line per dataset version (latest line per name wins)
    journal.log       append-only audit log, one entry per write/overwrite/annotate
    annotations.tsv   annotation ledger
    objects/<h>.bin   content-addressed payloads, h = FNV-1a 64 of the bytes
    .lock             advisory single-writer lock (flock)

Manifest columns: name, dtype code, rank, comma-joined dims, payload file,
then zero or more ``key=value`` attribute columns (percent-encoded).
Journal columns: seq, timestamp, actor, op, name, content hash.
All integers are decimal ASCII, payloads row-major little-endian and
timestamps ISO-8601 UTC.
"""

from __future__ import annotations

import enum
import fcntl
import fnmatch
import logging
import math
import os
import re
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Mapping
from urllib.parse import quote, unquote

import numpy as np

from tissueflow import kernels
from tissueflow.errors import (
    CorruptManifest,
    LockHeld,
    NameGrammarViolation,
    NotFound,
    ReadOnlyStore,
    SelectorOutOfBounds,
    SizeMismatch,
    StoreUnavailable,
)

logger = logging.getLogger(__name__)

DTYPES = {
    "u8": np.dtype("<u1"),
    "u16": np.dtype("<u2"),
    "i16": np.dtype("<i2"),
    "i32": np.dtype("<i4"),
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
}
_CODE_FOR = {dt.str: code for code, dt in DTYPES.items()}

NAME_RE = re.compile(r"[A-Za-z0-9_]{1,128}")
RESERVED_ATTRS = ("voxel_spacing", "origin", "orientation", "timestamp")
OPS = ("write", "overwrite", "annotate")

MANIFEST = "manifest.tsv"
JOURNAL = "journal.log"
ANNOTATIONS = "annotations.tsv"
OBJECTS = "objects"
LOCKFILE = ".lock"

_CHUNK = 1 << 20


def utcnow() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def content_hash(payload) -> str:
    return kernels.hexdigest(kernels.fnv1a64(payload))


def dtype_code(dtype) -> str:
    """Map a NumPy dtype to a store dtype code (bool is stored as u8)."""
    dt = np.dtype(dtype)
    if dt == np.bool_:
        return "u8"
    code = _CODE_FOR.get(dt.newbyteorder("<").str)
    if code is None:
        raise SizeMismatch(f"unsupported dtype {dt}")
    return code


class DatasetRole(enum.Enum):
    MASK2D = "Mask2D"
    VOLUME3D = "Volume3D"
    MASK3D = "Mask3D"
    SERIES4D = "Series4D"
    TABLE = "Table"
    SCALAR = "Scalar"
    UNKNOWN = "Unknown"


_ROLE_PREFIXES = (
    ("mask2D", 2, DatasetRole.MASK2D),
    ("volume3D", 3, DatasetRole.VOLUME3D),
    ("3Dmask", 3, DatasetRole.MASK3D),
    ("4Dseries", 4, DatasetRole.SERIES4D),
    ("table", 2, DatasetRole.TABLE),
)


def infer_role(name: str, rank: int) -> DatasetRole:
    """Role of a dataset from its name prefix and rank.

    A prefix only counts when the rank agrees with it; rank-0 datasets are
    scalars regardless of name.
    """
    if rank == 0:
        return DatasetRole.SCALAR
    for prefix, want_rank, role in _ROLE_PREFIXES:
        if name.startswith(prefix):
            return role if rank == want_rank else DatasetRole.UNKNOWN
    return DatasetRole.UNKNOWN


def check_name(name: str) -> None:
    if not isinstance(name, str) or not NAME_RE.fullmatch(name):
        raise NameGrammarViolation(f"invalid dataset name {name!r}: need [A-Za-z0-9_]{{1,128}}")


@dataclass(frozen=True)
class DatasetRecord:
    name: str
    dtype: str
    shape: tuple[int, ...]
    attrs: Mapping[str, str]
    payload: bytes
    content_hash: str

    @property
    def role(self) -> DatasetRole:
        return infer_role(self.name, len(self.shape))

    def array(self) -> np.ndarray:
        return np.frombuffer(self.payload, dtype=DTYPES[self.dtype]).reshape(self.shape)


@dataclass(frozen=True)
class DatasetInfo:
    name: str
    role: DatasetRole
    shape: tuple[int, ...]
    attrs: Mapping[str, str]
    dtype: str
    content_hash: str


@dataclass(frozen=True)
class JournalEntry:
    seq: int
    timestamp: str
    actor: str
    op: str
    name: str
    content_hash: str

    def to_line(self) -> str:
        return "\t".join([str(self.seq), self.timestamp, quote(self.actor, safe=""),
                          self.op, self.name, self.content_hash]) + "\n"

    @classmethod
    def from_line(cls, line: str) -> "JournalEntry":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 6 or parts[3] not in OPS:
            raise CorruptManifest(f"bad journal line: {line!r}")
        return cls(int(parts[0]), parts[1], unquote(parts[2]), parts[3], parts[4], parts[5])


@dataclass(frozen=True)
class Annotation:
    dataset: str
    selector: tuple[int, ...]
    label: str
    actor: str = "user"
    timestamp: str = ""

    def to_line(self) -> str:
        return "\t".join([self.dataset, ",".join(map(str, self.selector)),
                          quote(self.label, safe=""), quote(self.actor, safe=""),
                          self.timestamp]) + "\n"

    @classmethod
    def from_line(cls, line: str) -> "Annotation":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 5:
            raise CorruptManifest(f"bad annotation line: {line!r}")
        sel = tuple(int(v) for v in parts[1].split(",")) if parts[1] else ()
        return cls(parts[0], sel, unquote(parts[2]), unquote(parts[3]), parts[4])


@dataclass
class _Version:
    dtype: str
    shape: tuple[int, ...]
    file: str
    attrs: dict[str, str] = field(default_factory=dict)

    @property
    def content_hash(self) -> str:
        return self.file.removesuffix(".bin")

    @property
    def nbytes(self) -> int:
        return DTYPES[self.dtype].itemsize * math.prod(self.shape)

    def to_line(self, name: str) -> str:
        cols = [name, self.dtype, str(len(self.shape)), ",".join(map(str, self.shape)), self.file]
        cols += [f"{quote(k, safe='')}={quote(v, safe='')}" for k, v in sorted(self.attrs.items())]
        return "\t".join(cols) + "\n"


def _parse_manifest_line(line: str) -> tuple[str, _Version]:
    parts = line.rstrip("\n").split("\t")
    try:
        name, code, rank, dims, file = parts[:5]
        shape = tuple(int(d) for d in dims.split(",")) if dims else ()
        if code not in DTYPES or int(rank) != len(shape) or any(d <= 0 for d in shape):
            raise ValueError
        if not re.fullmatch(r"[0-9a-f]{16}\.bin", file):
            raise ValueError
        attrs = {}
        for col in parts[5:]:
            k, v = col.split("=", 1)
            attrs[unquote(k)] = unquote(v)
    except ValueError:
        raise CorruptManifest(f"bad manifest line: {line!r}") from None
    return name, _Version(code, shape, file, attrs)


def _read_lines(path: Path, repair: bool) -> list[str]:
    """Read complete lines; a torn trailing line (crash mid-append) is dropped."""
    if not path.exists():
        return []
    data = path.read_text(encoding="utf-8")
    if data and not data.endswith("\n"):
        cut = data.rfind("\n") + 1
        logger.warning("%s: dropping torn trailing record", path.name)
        if repair:
            with open(path, "r+b") as fh:
                fh.truncate(len(data[:cut].encode("utf-8")))
        data = data[:cut]
    return data.splitlines(keepends=True)


class Store:
    """Handle on a store directory. Use :func:`open_store` to create one.

    A writable handle holds an exclusive ``flock`` on the store; any number of
    read-only handles may coexist with it. Writes through one handle are
    serialized by an internal lock, so the handle can be shared by threads.
    """

    def __init__(self, path, readonly: bool = False):
        self.path = Path(path)
        self.readonly = readonly
        self._lock = threading.RLock()
        self._lock_fd: int | None = None
        try:
            if not readonly:
                self.path.mkdir(parents=True, exist_ok=True)
                (self.path / OBJECTS).mkdir(exist_ok=True)
                self._acquire_lock()
            elif not self.path.is_dir():
                raise StoreUnavailable(f"no store at {self.path}")
        except OSError as exc:
            raise StoreUnavailable(f"cannot open store at {self.path}: {exc}") from exc
        try:
            self._load()
        except BaseException:
            self.close()
            raise

    # -- lifecycle -------------------------------------------------------

    def _acquire_lock(self) -> None:
        fd = os.open(self.path / LOCKFILE, os.O_RDWR | os.O_CREAT, 0o644)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            os.close(fd)
            raise LockHeld(f"store {self.path} is locked by another writer") from None
        os.ftruncate(fd, 0)
        os.write(fd, f"{os.getpid()}\n".encode())
        self._lock_fd = fd

    def close(self) -> None:
        if self._lock_fd is not None:
            fcntl.flock(self._lock_fd, fcntl.LOCK_UN)
            os.close(self._lock_fd)
            self._lock_fd = None

    def __enter__(self) -> "Store":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass

    def refresh(self) -> None:
        """Reload manifest and journal from disk (for read-only handles)."""
        with self._lock:
            self._load()

    def _load(self) -> None:
        repair = not self.readonly
        self._versions: dict[str, list[_Version]] = {}
        for line in _read_lines(self.path / MANIFEST, repair):
            if not line.strip():
                continue
            name, ver = _parse_manifest_line(line)
            self._versions.setdefault(name, []).append(ver)
        for name, versions in self._versions.items():
            latest = versions[-1]
            blob = self.path / OBJECTS / latest.file
            try:
                size = blob.stat().st_size
            except FileNotFoundError:
                raise CorruptManifest(f"{name}: payload {latest.file} missing") from None
            if size != latest.nbytes:
                raise CorruptManifest(
                    f"{name}: payload {latest.file} has {size} bytes, expected {latest.nbytes}")
        self._journal: list[JournalEntry] = []
        for line in _read_lines(self.path / JOURNAL, repair):
            if not line.strip():
                continue
            entry = JournalEntry.from_line(line)
            if self._journal and entry.seq <= self._journal[-1].seq:
                raise CorruptManifest(f"journal seq not increasing at {entry.seq}")
            self._journal.append(entry)
        self._annotations: list[Annotation] = [
            Annotation.from_line(line) for line in _read_lines(self.path / ANNOTATIONS, repair)
            if line.strip()
        ]

    # -- queries ---------------------------------------------------------

    @property
    def journal_seq(self) -> int:
        return self._journal[-1].seq if self._journal else 0

    def __contains__(self, name: str) -> bool:
        return name in self._versions

    def names(self) -> list[str]:
        return sorted(self._versions)

    def _latest(self, name: str) -> _Version:
        try:
            return self._versions[name][-1]
        except KeyError:
            raise NotFound(f"no dataset named {name!r}") from None

    def info(self, name: str) -> DatasetInfo:
        v = self._latest(name)
        return DatasetInfo(name, infer_role(name, len(v.shape)), v.shape, dict(v.attrs),
                           v.dtype, v.content_hash)

    def payload_path(self, name: str) -> Path:
        return self.path / OBJECTS / self._latest(name).file

    def read_dataset(self, name: str) -> DatasetRecord:
        v = self._latest(name)
        payload = (self.path / OBJECTS / v.file).read_bytes()
        if len(payload) != v.nbytes:
            raise CorruptManifest(f"{name}: payload length {len(payload)} != {v.nbytes}")
        return DatasetRecord(name, v.dtype, v.shape, dict(v.attrs), payload, v.content_hash)

    def read_array(self, name: str) -> np.ndarray:
        return self.read_dataset(name).array()

    def read_stream(self, name: str, chunk_size: int = _CHUNK) -> Iterator[bytes]:
        v = self._latest(name)
        with open(self.path / OBJECTS / v.file, "rb") as fh:
            while True:
                chunk = fh.read(chunk_size)
                if not chunk:
                    return
                yield chunk

    def list_datasets(self, pattern: str = "*") -> list[DatasetInfo]:
        return [self.info(n) for n in sorted(self._versions) if fnmatch.fnmatchcase(n, pattern)]

    def history(self, name: str) -> list[JournalEntry]:
        return [e for e in self._journal if e.name == name]

    def journal(self) -> list[JournalEntry]:
        return list(self._journal)

    def annotations(self, dataset: str | None = None) -> list[Annotation]:
        return [a for a in self._annotations if dataset is None or a.dataset == dataset]

    def replay_journal(self) -> dict[str, str]:
        """Dataset name -> latest content hash, reconstructed from the journal alone."""
        state: dict[str, str] = {}
        for e in self._journal:
            if e.op in ("write", "overwrite"):
                state[e.name] = e.content_hash
        return state

    def current_state(self) -> dict[str, str]:
        return {n: v[-1].content_hash for n, v in self._versions.items()}

    def digest(self) -> str:
        """Digest over dataset contents and attributes (excluding timestamps)."""
        h = kernels.FNV_OFFSET
        for name in sorted(self._versions):
            v = self._versions[name][-1]
            attrs = sorted((k, val) for k, val in v.attrs.items() if k != "timestamp")
            line = f"{name}\t{v.dtype}\t{v.shape}\t{v.content_hash}\t{attrs}\n"
            h = kernels.fnv1a64(line.encode(), h)
        return kernels.hexdigest(h)

    def verify(self) -> list[str]:
        """Re-hash every latest payload; return a list of problems (empty if clean)."""
        problems = []
        for name, versions in sorted(self._versions.items()):
            v = versions[-1]
            h = kernels.FNV_OFFSET
            for chunk in self.read_stream(name):
                h = kernels.fnv1a64(chunk, h)
            if kernels.hexdigest(h) != v.content_hash:
                problems.append(f"{name}: content hash mismatch")
        if self.replay_journal() != self.current_state():
            problems.append("journal replay does not match manifest")
        return problems

    # -- mutation --------------------------------------------------------

    def _check_writable(self) -> None:
        if self.readonly or self._lock_fd is None:
            raise ReadOnlyStore(f"store {self.path} opened read-only")

    def _append(self, filename: str, line: str) -> None:
        with open(self.path / filename, "a", encoding="utf-8") as fh:
            fh.write(line)
            fh.flush()
            os.fsync(fh.fileno())

    def _journal_append(self, actor: str, op: str, name: str, digest: str) -> JournalEntry:
        entry = JournalEntry(self.journal_seq + 1, utcnow(), actor, op, name, digest)
        self._append(JOURNAL, entry.to_line())
        self._journal.append(entry)
        return entry

    def write_dataset(self, name: str, dtype: str, shape, payload, attrs=None,
                      actor: str = "system") -> JournalEntry:
        """Store ``payload`` (row-major little-endian bytes) under ``name``."""
        data = bytes(memoryview(payload).cast("B"))
        return self.write_stream(name, dtype, shape, [data], attrs=attrs, actor=actor)

    def write_array(self, name: str, array, attrs=None, actor: str = "system") -> JournalEntry:
        arr = np.asarray(array)
        code = dtype_code(arr.dtype)
        data = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
        return self.write_dataset(name, code, arr.shape, data, attrs=attrs, actor=actor)

    def write_stream(self, name: str, dtype: str, shape, chunks: Iterable[bytes], attrs=None,
                     actor: str = "system") -> JournalEntry:
        """Write a payload delivered as an iterable of byte chunks."""
        check_name(name)
        if dtype not in DTYPES:
            raise SizeMismatch(f"unknown dtype code {dtype!r}")
        shape = tuple(int(d) for d in shape)
        if any(d <= 0 for d in shape):
            raise SizeMismatch(f"dims must be positive, got {shape}")
        attrs = {str(k): str(v) for k, v in (attrs or {}).items()}
        expected = DTYPES[dtype].itemsize * math.prod(shape)
        with self._lock:
            self._check_writable()
            objects = self.path / OBJECTS
            tmp = objects / f".tmp-{os.getpid()}-{threading.get_ident()}"
            h = kernels.FNV_OFFSET
            total = 0
            try:
                with open(tmp, "wb") as fh:
                    for chunk in chunks:
                        h = kernels.fnv1a64(chunk, h)
                        total += len(chunk)
                        fh.write(chunk)
                    fh.flush()
                    os.fsync(fh.fileno())
                if total != expected:
                    raise SizeMismatch(f"{name}: payload has {total} bytes, "
                                       f"{dtype}{list(shape)} needs {expected}")
                digest = kernels.hexdigest(h)
                os.replace(tmp, objects / f"{digest}.bin")
            finally:
                if tmp.exists():
                    tmp.unlink()
            version = _Version(dtype, shape, f"{digest}.bin", attrs)
            op = "overwrite" if name in self._versions else "write"
            self._append(MANIFEST, version.to_line(name))
            self._versions.setdefault(name, []).append(version)
            return self._journal_append(actor, op, name, digest)

    def annotate(self, annotation: Annotation) -> JournalEntry:
        with self._lock:
            self._check_writable()
            v = self._latest(annotation.dataset)
            sel = tuple(int(s) for s in annotation.selector)
            if not sel or len(sel) > len(v.shape) or any(
                    not 0 <= s < d for s, d in zip(sel, v.shape)):
                raise SelectorOutOfBounds(
                    f"selector {sel} outside {annotation.dataset}{list(v.shape)}")
            ann = Annotation(annotation.dataset, sel, annotation.label, annotation.actor,
                             annotation.timestamp or utcnow())
            line = ann.to_line()
            self._append(ANNOTATIONS, line)
            self._annotations.append(ann)
            return self._journal_append(ann.actor, "annotate", ann.dataset,
                                        content_hash(line.encode()))

    def append_ledger(self, ledger: str, fields: list[str], actor: str = "system") -> JournalEntry:
        """Append a tab-separated record to ``<ledger>.tsv`` and journal it as an annotation."""
        check_name(ledger)
        with self._lock:
            self._check_writable()
            line = "\t".join(quote(f, safe="") for f in fields) + "\n"
            self._append(f"{ledger}.tsv", line)
            return self._journal_append(actor, "annotate", ledger, content_hash(line.encode()))

    def read_ledger(self, ledger: str) -> list[list[str]]:
        check_name(ledger)
        return [[unquote(f) for f in line.rstrip("\n").split("\t")]
                for line in _read_lines(self.path / f"{ledger}.tsv", repair=False) if line.strip()]

    def gc(self) -> int:
        """Compact the manifest to latest versions and delete unreferenced payloads.

        Returns the number of payload files removed. Journal history is kept, but
        payloads of superseded versions are no longer readable afterwards.
        """
        with self._lock:
            self._check_writable()
            keep = {v[-1].file for v in self._versions.values()}
            tmp = self.path / (MANIFEST + ".tmp")
            with open(tmp, "w", encoding="utf-8") as fh:
                for name in sorted(self._versions):
                    fh.write(self._versions[name][-1].to_line(name))
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, self.path / MANIFEST)
            self._versions = {n: [v[-1]] for n, v in self._versions.items()}
            removed = 0
            for blob in (self.path / OBJECTS).glob("*.bin"):
                if blob.name not in keep:
                    blob.unlink()
                    removed += 1
            return removed


def open_store(path, readonly: bool = False) -> Store:
    """Open (creating if needed) the store at ``path``."""
    return Store(path, readonly=readonly)
