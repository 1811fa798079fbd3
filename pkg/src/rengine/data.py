"""Datasets on disk and the task streams built from them.

A dataset is a directory holding ``manifest.json`` plus chunk files of
fixed-size little-endian records (``d`` doubles followed by a ``u32``
label). Scenarios are prepared once per working directory and then split
into tasks by :func:`setup`; task handles only reference example indices,
so several trials can read the same prepared data concurrently.
"""

from __future__ import annotations

import json
import math
import os
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from ._io import CorruptionError, atomic_write_bytes, canonical_json, file_sha256, sha256_hex
from .nn import Batch

CHUNK_BYTES = 4 * 1024 * 1024
SENTINEL = ".prepared"


# --------------------------------------------------------------------------
# binary dataset files


def record_dtype(feature_dim: int) -> np.dtype:
    return np.dtype([("x", "<f8", (feature_dim,)), ("y", "<u4")])


def write_dataset(directory, features: np.ndarray, labels: np.ndarray, num_classes: int) -> dict:
    """Write a dataset pair and return its manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n, d = features.shape
    if labels.shape != (n,):
        raise ValueError("labels must be a vector matching the feature rows")
    if n and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    dt = record_dtype(d)
    per_chunk = max(1, CHUNK_BYTES // dt.itemsize)
    records = np.empty(n, dtype=dt)
    records["x"] = features
    records["y"] = labels
    chunk_files = []
    for c, start in enumerate(range(0, max(n, 1), per_chunk)):
        name = f"chunk_{c:05d}.bin"
        (directory / name).write_bytes(records[start : start + per_chunk].tobytes())
        chunk_files.append(name)
    manifest = {
        "num_examples": int(n),
        "feature_dim": int(d),
        "num_classes": int(num_classes),
        "record_bytes": int(dt.itemsize),
        "chunk_files": chunk_files,
    }
    manifest["checksum"] = _payload_checksum(directory, chunk_files)
    (directory / "manifest.json").write_bytes(canonical_json(manifest))
    return manifest


def _payload_checksum(directory: Path, chunk_files: Sequence[str]) -> str:
    return sha256_hex("".join(file_sha256(directory / f) for f in chunk_files).encode())


def read_manifest(directory, verify: bool = False) -> dict:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    manifest = json.loads(path.read_text())
    expected = manifest["feature_dim"] * 8 + 4
    if manifest["record_bytes"] != expected:
        raise CorruptionError(f"record_bytes {manifest['record_bytes']} != {expected}", path)
    sizes = [(directory / f).stat().st_size for f in manifest["chunk_files"]]
    if sum(sizes) != manifest["num_examples"] * manifest["record_bytes"]:
        raise CorruptionError("chunk sizes disagree with num_examples", path)
    if verify and _payload_checksum(directory, manifest["chunk_files"]) != manifest["checksum"]:
        raise CorruptionError("dataset checksum mismatch", path)
    return manifest


def _open_records(directory: Path, manifest: dict) -> list[np.ndarray]:
    dt = record_dtype(manifest["feature_dim"])
    out = []
    for name in manifest["chunk_files"]:
        path = directory / name
        if path.stat().st_size == 0:
            continue
        out.append(np.memmap(path, dtype=dt, mode="r"))
    return out


def read_records(directory, indices: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Features and labels for ``indices`` (all records when ``None``)."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    chunks = _open_records(directory, manifest)
    d = manifest["feature_dim"]
    if indices is None:
        indices = np.arange(manifest["num_examples"])
    indices = np.asarray(indices, dtype=np.int64)
    x = np.empty((indices.size, d))
    y = np.empty(indices.size, dtype=np.int64)
    per_chunk = max(1, CHUNK_BYTES // manifest["record_bytes"])
    chunk_of = indices // per_chunk
    for c in np.unique(chunk_of):
        sel = chunk_of == c
        rec = chunks[c][indices[sel] - c * per_chunk]
        x[sel] = rec["x"]
        y[sel] = rec["y"]
    return x, y


# --------------------------------------------------------------------------
# scenario description


@dataclass
class BlobSource:
    """K isotropic unit-variance Gaussians with means on a circle."""

    num_classes: int = 10
    feature_dim: int = 2
    train_per_class: int = 300
    test_per_class: int = 100
    radius: float = 4.0
    seed: int = 0
    kind: str = "synthetic_blobs"

    def generate(self):
        if self.feature_dim < 2:
            raise ValueError("synthetic blobs need feature_dim >= 2")
        rng = np.random.default_rng(self.seed)
        out = {}
        for split, per_class in (("train", self.train_per_class), ("test", self.test_per_class)):
            means = np.zeros((self.num_classes, self.feature_dim))
            angle = 2 * np.pi * np.arange(self.num_classes) / self.num_classes
            means[:, 0] = self.radius * np.cos(angle)
            means[:, 1] = self.radius * np.sin(angle)
            y = np.repeat(np.arange(self.num_classes), per_class)
            x = means[y] + rng.standard_normal((y.size, self.feature_dim))
            order = rng.permutation(y.size)
            out[split] = (x[order], y[order])
        return out


@dataclass
class FileSource:
    """A directory with ``train/`` and ``test/`` dataset pairs."""

    path: str
    kind: str = "file"


@dataclass
class ClassIncremental:
    num_tasks: int
    class_order: list[int] | None = None
    kind: str = "class_incremental"


@dataclass
class Rotation:
    angles: list[float]
    kind: str = "rotation"


@dataclass
class ScenarioSpec:
    source: BlobSource | FileSource
    kind: ClassIncremental | Rotation
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.val_fraction < 0.5:
            raise ValueError("val_fraction must lie in (0, 0.5)")
        if isinstance(self.kind, ClassIncremental):
            if self.kind.num_tasks < 1:
                raise ValueError("num_tasks must be >= 1")
            if self.kind.class_order is not None:
                _check_permutation(self.kind.class_order)
        elif isinstance(self.kind, Rotation):
            if not self.kind.angles:
                raise ValueError("rotation scenario needs at least one angle")

    @property
    def num_tasks(self) -> int:
        if isinstance(self.kind, ClassIncremental):
            return self.kind.num_tasks
        return len(self.kind.angles)

    def to_dict(self) -> dict:
        return {
            "source": dict(vars(self.source)),
            "kind": dict(vars(self.kind)),
            "val_fraction": self.val_fraction,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        src = dict(d["source"])
        src_kind = src.pop("kind", "synthetic_blobs")
        if src_kind == "synthetic_blobs":
            source = BlobSource(**src)
        elif src_kind == "file":
            source = FileSource(**src)
        else:
            raise ValueError(f"unknown source kind {src_kind!r}")
        kd = dict(d["kind"])
        k_kind = kd.pop("kind", None)
        if k_kind == "class_incremental":
            kind = ClassIncremental(**kd)
        elif k_kind == "rotation":
            kind = Rotation(**kd)
        else:
            raise ValueError(f"unknown scenario kind {k_kind!r}")
        return cls(
            source=source,
            kind=kind,
            val_fraction=d.get("val_fraction", 0.1),
            seed=d.get("seed", 0),
        )


def _check_permutation(perm) -> list[int]:
    perm = [int(p) for p in perm]
    if sorted(perm) != list(range(len(perm))):
        raise ValueError(f"{perm} is not a permutation of 0..{len(perm) - 1}")
    return perm


def apply_class_order(spec: ScenarioSpec, permutation: Sequence[int]) -> ScenarioSpec:
    """Copy of ``spec`` whose class-incremental tasks follow ``permutation``."""
    if not isinstance(spec.kind, ClassIncremental):
        raise ValueError("class order only applies to class-incremental scenarios")
    perm = _check_permutation(permutation)
    if isinstance(spec.source, BlobSource) and len(perm) != spec.source.num_classes:
        raise ValueError(f"permutation covers {len(perm)} classes, source has {spec.source.num_classes}")
    if perm == list(range(len(perm))) and spec.kind.class_order is None:
        return spec
    return replace(spec, kind=replace(spec.kind, class_order=perm))


# --------------------------------------------------------------------------
# preparation and setup


def _source_fingerprint(spec: ScenarioSpec) -> str:
    src = dict(vars(spec.source))
    if isinstance(spec.source, FileSource):
        root = Path(spec.source.path)
        src["payload"] = [
            read_manifest(root / split)["checksum"] for split in ("train", "test")
        ]
        src["path"] = str(root.resolve())
    return sha256_hex(canonical_json(src))


def _raw_is_valid(raw: Path) -> bool:
    try:
        for split in ("train", "test"):
            read_manifest(raw / split, verify=True)
    except (OSError, CorruptionError, KeyError, ValueError):
        return False
    return True


def prepare_data(spec: ScenarioSpec, workdir) -> bool:
    """Materialize the raw dataset under ``workdir/raw``.

    Idempotent: when the sentinel matches the source and the payload
    verifies, nothing is written and ``False`` is returned. Otherwise the
    data is rebuilt in a temporary directory, swapped in, and the sentinel
    written last.
    """
    workdir = Path(workdir)
    if isinstance(spec.source, FileSource):
        for split in ("train", "test"):
            if not (Path(spec.source.path) / split / "manifest.json").exists():
                raise FileNotFoundError(f"source dataset missing: {Path(spec.source.path) / split}")
    fingerprint = _source_fingerprint(spec)
    sentinel = workdir / SENTINEL
    raw = workdir / "raw"
    if sentinel.exists() and sentinel.read_text().strip() == fingerprint and _raw_is_valid(raw):
        return False

    workdir.mkdir(parents=True, exist_ok=True)
    if sentinel.exists():
        sentinel.unlink()
    tmp = workdir / "raw.tmp"
    if tmp.exists():
        shutil.rmtree(tmp)
    if isinstance(spec.source, BlobSource):
        k = spec.source.num_classes
        for split, (x, y) in spec.source.generate().items():
            write_dataset(tmp / split, x, y, k)
    else:
        for split in ("train", "test"):
            src = Path(spec.source.path) / split
            read_manifest(src, verify=True)
            shutil.copytree(src, tmp / split)
    if raw.exists():
        shutil.rmtree(raw)
    os.replace(tmp, raw)
    atomic_write_bytes(sentinel, (fingerprint + "\n").encode(), fsync=True)
    return True


@dataclass
class DatasetHandle:
    """A subset of an on-disk dataset, optionally rotated on read."""

    manifest_path: str
    indices: np.ndarray
    feature_dim: int
    num_classes: int
    split: str
    rotation: float = 0.0

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.split not in ("train", "val", "test"):
            raise ValueError(f"unknown split {self.split!r}")

    @property
    def num_examples(self) -> int:
        return int(self.indices.size)

    def load(self) -> tuple[np.ndarray, np.ndarray]:
        x, y = read_records(Path(self.manifest_path).parent, self.indices)
        if self.rotation:
            x = rotate_features(x, self.rotation)
        return x, y

    def to_dict(self) -> dict:
        return {
            "manifest_path": str(self.manifest_path),
            "indices": self.indices.tolist(),
            "feature_dim": self.feature_dim,
            "num_classes": self.num_classes,
            "split": self.split,
            "rotation": self.rotation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetHandle":
        return cls(**d)


@dataclass
class Task:
    task_id: int
    train: DatasetHandle
    val: DatasetHandle
    test: DatasetHandle


@dataclass
class TaskStream:
    tasks: list[Task] = field(default_factory=list)

    def __post_init__(self):
        if [t.task_id for t in self.tasks] != list(range(len(self.tasks))):
            raise ValueError("task ids must be 0..T-1 in order")

    def __len__(self):
        return len(self.tasks)

    def __getitem__(self, i) -> Task:
        return self.tasks[i]

    @property
    def num_classes(self) -> int:
        return self.tasks[0].train.num_classes

    @property
    def feature_dim(self) -> int:
        return self.tasks[0].train.feature_dim

    def to_dict(self) -> dict:
        return {
            "tasks": [
                {
                    "task_id": t.task_id,
                    "train": t.train.to_dict(),
                    "val": t.val.to_dict(),
                    "test": t.test.to_dict(),
                }
                for t in self.tasks
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskStream":
        return cls(
            [
                Task(
                    t["task_id"],
                    DatasetHandle.from_dict(t["train"]),
                    DatasetHandle.from_dict(t["val"]),
                    DatasetHandle.from_dict(t["test"]),
                )
                for t in d["tasks"]
            ]
        )


def _split_train_val(indices: np.ndarray, val_fraction: float, seed: int, task_id: int):
    rng = np.random.default_rng([seed, task_id])
    shuffled = rng.permutation(indices)
    n_val = max(1, int(round(val_fraction * indices.size)))
    return np.sort(shuffled[n_val:]), np.sort(shuffled[:n_val])


def setup(spec: ScenarioSpec, workdir, seed: int | None = None) -> TaskStream:
    """Build the task stream. Requires a completed :func:`prepare_data`."""
    workdir = Path(workdir)
    raw = workdir / "raw"
    if not (workdir / SENTINEL).exists():
        raise RuntimeError(f"{workdir} is not prepared; run prepare_data(spec, workdir) first")
    seed = spec.seed if seed is None else seed
    train_m = read_manifest(raw / "train")
    test_m = read_manifest(raw / "test")
    k, d = train_m["num_classes"], train_m["feature_dim"]
    _, y_train = read_records(raw / "train")
    _, y_test = read_records(raw / "test")
    train_path = str(raw / "train" / "manifest.json")
    test_path = str(raw / "test" / "manifest.json")

    if isinstance(spec.kind, Rotation):
        train_idx, val_idx = _split_train_val(np.arange(y_train.size), spec.val_fraction, seed, 0)
        train = DatasetHandle(train_path, train_idx, d, k, "train")
        val = DatasetHandle(train_path, val_idx, d, k, "val")
        test = DatasetHandle(test_path, np.arange(y_test.size), d, k, "test")
        return make_rotation_tasks((train, val, test), spec.kind.angles)

    num_tasks = spec.kind.num_tasks
    if k % num_tasks:
        raise ValueError(f"{k} classes cannot be split evenly into {num_tasks} tasks")
    order = spec.kind.class_order or list(range(k))
    if len(order) != k:
        raise ValueError(f"class_order has {len(order)} entries, dataset has {k} classes")
    per_task = k // num_tasks
    tasks = []
    for t in range(num_tasks):
        classes = order[t * per_task : (t + 1) * per_task]
        pool = np.flatnonzero(np.isin(y_train, classes))
        tr, va = _split_train_val(pool, spec.val_fraction, seed, t)
        te = np.flatnonzero(np.isin(y_test, classes))
        tasks.append(
            Task(
                t,
                DatasetHandle(train_path, tr, d, k, "train"),
                DatasetHandle(train_path, va, d, k, "val"),
                DatasetHandle(test_path, te, d, k, "test"),
            )
        )
    return TaskStream(tasks)


def task_classes(task: Task) -> set[int]:
    _, y = read_records(Path(task.test.manifest_path).parent, task.test.indices)
    return set(np.unique(y).tolist())


# --------------------------------------------------------------------------
# rotations


def rotate_features(x: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate 2D points, or square images (nearest neighbour, about the centre)."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[1]
    if degrees == 0:
        return x.copy()
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    if d == 2:
        return np.column_stack((c * x[:, 0] - s * x[:, 1], s * x[:, 0] + c * x[:, 1]))
    side = math.isqrt(d)
    if side * side != d:
        raise ValueError(f"feature dim {d} is neither 2 nor a perfect square")
    centre = (side - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    dy, dx = rows - centre, cols - centre
    # inverse mapping: each output pixel samples the source rotated by -theta
    src_r = np.rint(centre + c * dy - s * dx).astype(int)
    src_c = np.rint(centre + s * dy + c * dx).astype(int)
    inside = (src_r >= 0) & (src_r < side) & (src_c >= 0) & (src_c < side)
    images = x.reshape(-1, side, side)
    out = np.zeros_like(images)
    out[:, inside] = images[:, src_r[inside], src_c[inside]]
    return out.reshape(-1, d)


def make_rotation_tasks(base, angles: Sequence[float]) -> TaskStream:
    """One task per angle, each holding every base example rotated by it.

    ``base`` is a ``(train, val, test)`` triple of handles or a single
    handle (used for all three splits).
    """
    if isinstance(base, DatasetHandle):
        base = (base, base, base)
    d = base[0].feature_dim
    if d != 2 and math.isqrt(d) ** 2 != d:
        raise ValueError(f"feature dim {d} is neither 2 nor a perfect square")
    tasks = []
    for t, angle in enumerate(angles):
        tr, va, te = (replace(h, rotation=float(angle)) for h in base)
        tasks.append(Task(t, tr, va, te))
    return TaskStream(tasks)


# --------------------------------------------------------------------------
# batching


def load_handles(handles: Sequence[DatasetHandle]) -> tuple[np.ndarray, np.ndarray]:
    parts = [h.load() for h in handles]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def iterate_batches(x, y, batch_size: int, epoch_seed) -> Iterator[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(epoch_seed).permutation(len(y))
    for start in range(0, len(y), batch_size):
        idx = order[start : start + batch_size]
        yield Batch(x[idx], y[idx])


def batch_iterator(handle, batch_size: int, epoch_seed) -> Iterator[Batch]:
    """One epoch over ``handle`` (or a list of handles) in a seeded shuffle."""
    handles = [handle] if isinstance(handle, DatasetHandle) else list(handle)
    x, y = load_handles(handles)
    return iterate_batches(x, y, batch_size, epoch_seed)
