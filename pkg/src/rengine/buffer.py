"""Disk-backed rehearsal memory filled by reservoir sampling.

Records are fixed size and appended to chunk files; a slot index in the
manifest maps each occupied slot to ``(chunk_file, offset)``. Replacing a
slot appends a fresh record and repoints the index, so a crash mid-update
never tears a record the manifest refers to. Only the manifest is read
eagerly; samples are fetched with one positioned read per record.

Reservoir decisions are counter based: the draw for the ``n``-th stream
element is a hash of ``(seed, n)``. The buffer therefore carries no hidden
generator state, and resuming from disk continues the exact same sequence.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ._io import CorruptionError, atomic_write_bytes, canonical_json, fsync_tree, read_json, verify_checksum, with_checksum
from .nn import Batch

CHUNK_BYTES = 4 * 1024 * 1024
FORMAT = "rengine-buffer-1"
_U64 = np.uint64


# --------------------------------------------------------------------------
# reservoir core


def _splitmix64(x: np.ndarray) -> np.ndarray:
    # uint64 arithmetic wraps modulo 2**64 by design
    with np.errstate(over="ignore"):
        z = x + _U64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> _U64(27))) * _U64(0x94D049BB133111EB)
    return z ^ (z >> _U64(31))


def reservoir_draws(seed, seen_index) -> np.ndarray:
    """Uniform integers ``j`` in ``[0, n)`` keyed by ``(seed, n)``.

    Both arguments broadcast, which lets Monte-Carlo checks evaluate many
    seeds at once with the same code path the buffer uses.
    """
    seed = np.asarray(seed, dtype=np.uint64)
    n = np.asarray(seen_index, dtype=np.uint64)
    h = _splitmix64(_splitmix64(seed) ^ n)
    u = (h >> _U64(11)).astype(np.float64) * 2.0**-53
    nf = n.astype(np.float64)
    return np.minimum(np.floor(u * nf), nf - 1).astype(np.int64)


def reservoir_slots(seen_index, capacity: int, draws) -> np.ndarray:
    """Target slot for each stream element, or -1 when it is discarded.

    Algorithm R: the first ``capacity`` elements fill slots in order; the
    ``n``-th later element lands in slot ``j`` when its draw ``j < capacity``,
    i.e. with probability ``capacity / n``.
    """
    n = np.asarray(seen_index, dtype=np.int64)
    draws = np.asarray(draws, dtype=np.int64)
    return np.where(n <= capacity, n - 1, np.where(draws < capacity, draws, -1))


# --------------------------------------------------------------------------
# records


@dataclass
class RehearsalRecord:
    features: np.ndarray
    label: int
    logits: np.ndarray | None
    task_id: int
    seen_index: int


def record_dtype(feature_dim: int, num_classes: int, stores_logits: bool) -> np.dtype:
    fields = [("x", "<f8", (feature_dim,)), ("y", "<u4")]
    if stores_logits:
        fields.append(("z", "<f8", (num_classes,)))
    fields += [("t", "<u4"), ("n", "<u8")]
    return np.dtype(fields)


def records_to_batch(records: Sequence[RehearsalRecord]) -> Batch:
    logits = None
    if records and records[0].logits is not None:
        logits = np.stack([r.logits for r in records])
    return Batch(
        np.stack([r.features for r in records]),
        np.array([r.label for r in records]),
        logits,
    )


class RehearsalBuffer:
    """Capacity-bounded reservoir of past examples persisted in ``directory``.

    A single process owns a buffer directory while writing; copy the
    directory (:meth:`copy_to`) to give another writer its own buffer.
    """

    def __init__(self, directory, manifest: dict):
        self.directory = Path(directory)
        self.manifest = manifest
        self.dtype = record_dtype(self.feature_dim, self.num_classes, self.stores_logits)
        self.bytes_read = 0
        self.reads = 0

    # -- construction ---------------------------------------------------

    @classmethod
    def create(
        cls,
        directory,
        capacity: int,
        feature_dim: int,
        num_classes: int,
        stores_logits: bool = False,
        seed: int = 0,
    ) -> "RehearsalBuffer":
        if capacity < 1:
            raise ValueError("buffer capacity must be >= 1")
        directory = Path(directory)
        if directory.exists() and any(directory.iterdir()):
            raise FileExistsError(f"{directory} is not empty; refusing to create a buffer there")
        directory.mkdir(parents=True, exist_ok=True)
        dt = record_dtype(feature_dim, num_classes, stores_logits)
        manifest = {
            "format": FORMAT,
            "capacity": int(capacity),
            "count": 0,
            "seen": 0,
            "rng_state": _rng_hex(seed, 0),
            "stores_logits": bool(stores_logits),
            "feature_dim": int(feature_dim),
            "num_classes": int(num_classes),
            "record_bytes": int(dt.itemsize),
            "slot_index": [],
            "generation": 0,
            "write_chunk": 0,
            "write_offset": 0,
            "appended": 0,
        }
        buf = cls(directory, manifest)
        buf._write_manifest(fsync=True)
        return buf

    @classmethod
    def load(cls, directory) -> "RehearsalBuffer":
        directory = Path(directory)
        path = directory / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"no buffer manifest at {path}")
        manifest = read_json(path)
        verify_checksum(manifest, path)
        if manifest.get("format") != FORMAT:
            raise CorruptionError(f"unsupported buffer format {manifest.get('format')!r}", path)
        manifest = {k: v for k, v in manifest.items() if k != "checksum"}
        buf = cls(directory, manifest)
        buf._validate()
        return buf

    def _validate(self):
        m = self.manifest
        if m["count"] != min(m["seen"], m["capacity"]) or len(m["slot_index"]) != m["count"]:
            raise CorruptionError("count disagrees with seen/capacity", self.directory)
        rb = m["record_bytes"]
        sizes = {}
        for name, offset in m["slot_index"]:
            if name not in sizes:
                p = self.directory / name
                if not p.exists():
                    raise CorruptionError(f"missing chunk file {name}", self.directory)
                sizes[name] = p.stat().st_size
            if offset + rb > sizes[name] or offset % rb:
                raise CorruptionError(f"slot points outside {name}", self.directory)

    # -- properties -----------------------------------------------------

    capacity = property(lambda self: self.manifest["capacity"])
    count = property(lambda self: self.manifest["count"])
    seen = property(lambda self: self.manifest["seen"])
    stores_logits = property(lambda self: self.manifest["stores_logits"])
    feature_dim = property(lambda self: self.manifest["feature_dim"])
    num_classes = property(lambda self: self.manifest["num_classes"])
    record_bytes = property(lambda self: self.manifest["record_bytes"])

    @property
    def seed(self) -> int:
        return int(self.manifest["rng_state"][:16], 16)

    def __len__(self):
        return self.count

    # -- writes ---------------------------------------------------------

    def _chunk_name(self, chunk: int) -> str:
        return f"chunk_{self.manifest['generation']:04d}_{chunk:05d}.bin"

    def _write_record(self, name: str, offset: int, data: bytes) -> None:
        fd = os.open(self.directory / name, os.O_RDWR | os.O_CREAT, 0o644)
        try:
            os.pwrite(fd, data, offset)
        finally:
            os.close(fd)

    def _append(self, data: bytes) -> tuple[str, int]:
        m = self.manifest
        rb = m["record_bytes"]
        if m["write_offset"] + rb > max(CHUNK_BYTES, rb):
            m["write_chunk"] += 1
            m["write_offset"] = 0
        name = self._chunk_name(m["write_chunk"])
        offset = m["write_offset"]
        self._write_record(name, offset, data)
        m["write_offset"] += rb
        m["appended"] += 1
        return name, offset

    def _write_manifest(self, fsync: bool = False) -> None:
        atomic_write_bytes(
            self.directory / "manifest.json", canonical_json(with_checksum(self.manifest)), fsync
        )

    def update(
        self,
        features: np.ndarray,
        labels: np.ndarray,
        task_id: int = 0,
        logits: np.ndarray | None = None,
    ) -> np.ndarray:
        """Offer a batch to the reservoir; returns the slot per row (-1 = dropped).

        Records are written before the manifest, so an interrupted update
        leaves the previous manifest, and every record it names, intact.
        """
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        labels = np.asarray(labels).reshape(-1)
        n_new = features.shape[0]
        if features.shape[1] != self.feature_dim:
            raise ValueError(
                f"record feature dim {features.shape[1]} != buffer feature dim {self.feature_dim}"
            )
        if labels.size != n_new:
            raise ValueError("labels do not match the number of feature rows")
        if np.any(labels < 0) or np.any(labels >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.stores_logits:
            if logits is None:
                raise ValueError("this buffer stores logits; pass logits for every record")
            logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
            if logits.shape != (n_new, self.num_classes):
                raise ValueError(f"logits must have shape ({n_new}, {self.num_classes})")
        elif logits is not None:
            raise ValueError("this buffer does not store logits")

        m = dict(self.manifest)
        m["slot_index"] = list(self.manifest["slot_index"])
        staged = self.manifest
        self.manifest = m
        try:
            seen = np.arange(m["seen"] + 1, m["seen"] + n_new + 1)
            slots = reservoir_slots(seen, m["capacity"], reservoir_draws(self.seed, seen))
            rec = np.zeros(n_new, dtype=self.dtype)
            rec["x"] = features
            rec["y"] = labels
            if self.stores_logits:
                rec["z"] = logits
            rec["t"] = task_id
            rec["n"] = seen
            for i in np.flatnonzero(slots >= 0):
                loc = list(self._append(rec[i : i + 1].tobytes()))
                if slots[i] == len(m["slot_index"]):
                    m["slot_index"].append(loc)
                else:
                    m["slot_index"][slots[i]] = loc
            m["seen"] += n_new
            m["count"] = min(m["seen"], m["capacity"])
            m["rng_state"] = _rng_hex(self.seed, m["seen"])
            self._write_manifest()
        except BaseException:
            self.manifest = staged
            raise
        return slots

    def set_logits(self, slot: int, logits: np.ndarray) -> None:
        if not self.stores_logits:
            raise ValueError("this buffer does not store logits")
        if not 0 <= slot < self.count:
            raise IndexError(f"slot {slot} is not occupied (count={self.count})")
        logits = np.asarray(logits, dtype="<f8").reshape(-1)
        if logits.size != self.num_classes:
            raise ValueError(f"expected {self.num_classes} logits, got {logits.size}")
        name, offset = self.manifest["slot_index"][slot]
        self._write_record(name, offset + self.dtype.fields["z"][1], logits.tobytes())

    # -- reads ----------------------------------------------------------

    def read_slots(self, slots: Sequence[int]) -> list[RehearsalRecord]:
        rb = self.record_bytes
        out = []
        fds: dict[str, int] = {}
        try:
            for s in slots:
                s = int(s)
                if not 0 <= s < self.count:
                    raise IndexError(f"slot {s} is not occupied (count={self.count})")
                name, offset = self.manifest["slot_index"][s]
                if name not in fds:
                    fds[name] = os.open(self.directory / name, os.O_RDONLY)
                raw = os.pread(fds[name], rb, offset)
                if len(raw) != rb:
                    raise CorruptionError(f"short read in {name} at {offset}", self.directory)
                self.bytes_read += rb
                self.reads += 1
                r = np.frombuffer(raw, dtype=self.dtype)[0]
                out.append(
                    RehearsalRecord(
                        np.array(r["x"], dtype=np.float64),
                        int(r["y"]),
                        np.array(r["z"], dtype=np.float64) if self.stores_logits else None,
                        int(r["t"]),
                        int(r["n"]),
                    )
                )
        finally:
            for fd in fds.values():
                os.close(fd)
        return out

    def sample(self, k: int, rng: np.random.Generator) -> list[RehearsalRecord]:
        """``k`` uniformly drawn records (with replacement only if ``k > count``)."""
        if self.count == 0:
            raise ValueError("cannot sample from an empty buffer")
        if k > self.count:
            slots = rng.integers(0, self.count, size=k)
        else:
            slots = rng.choice(self.count, size=k, replace=False)
        return self.read_slots(slots)

    def all_records(self) -> list[RehearsalRecord]:
        return self.read_slots(range(self.count))

    # -- persistence ----------------------------------------------------

    @property
    def garbage(self) -> int:
        return self.manifest["appended"] - self.count

    def save(self) -> None:
        """Compact when more than half the appended records are dead, then fsync."""
        m = self.manifest
        if m["appended"] and self.garbage > 0.5 * m["appended"]:
            self._compact()
        self._collect_unreferenced()
        self._write_manifest(fsync=True)
        fsync_tree(self.directory)

    def _compact(self):
        live = [bytes(self._raw(name, off)) for name, off in self.manifest["slot_index"]]
        m = self.manifest
        m["generation"] += 1
        m["write_chunk"] = 0
        m["write_offset"] = 0
        m["appended"] = 0
        m["slot_index"] = [list(self._append(data)) for data in live]
        self._write_manifest(fsync=True)

    def _raw(self, name, offset) -> bytes:
        fd = os.open(self.directory / name, os.O_RDONLY)
        try:
            return os.pread(fd, self.record_bytes, offset)
        finally:
            os.close(fd)

    def _collect_unreferenced(self):
        keep = {name for name, _ in self.manifest["slot_index"]}
        keep.add(self._chunk_name(self.manifest["write_chunk"]))
        for p in self.directory.glob("chunk_*.bin"):
            if p.name not in keep:
                p.unlink()

    def copy_to(self, directory) -> "RehearsalBuffer":
        import shutil

        shutil.copytree(self.directory, directory)
        return RehearsalBuffer.load(directory)


def _rng_hex(seed: int, counter: int) -> str:
    return f"{int(seed) & 0xFFFFFFFFFFFFFFFF:016x}{int(counter):016x}"


def buffer_create(capacity, directory, stores_logits=False, *, feature_dim, num_classes, seed=0):
    return RehearsalBuffer.create(directory, capacity, feature_dim, num_classes, stores_logits, seed)


def buffer_load(directory) -> RehearsalBuffer:
    return RehearsalBuffer.load(directory)
