"""One model-update session and the state directory it produces.

A session loads the previous state (or initialises a fresh model), trains
on the new task with the configured learner, keeps the parameters of the
best epoch under the target metric, and commits the new state directory
atomically. The layout of a state directory::

    version  session.json  model.spec.json  model.ckpt  optimizer.ckpt
    learner.json  ewc_anchor.bin  ewc_fisher.bin  buffer/
    metrics.csv  hpo_history.csv  hpo_summary.csv  history/<counter>/

``session.json`` records the update counter, optimizer hyperparameters
and a sha256 for every component, and carries its own checksum.
"""

from __future__ import annotations

import contextlib
import csv
import io
import json
import os
import shutil
import tempfile
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from ._io import CorruptionError, canonical_json, file_sha256, fsync_tree, read_json, verify_checksum, with_checksum
from .buffer import RehearsalBuffer
from .data import TaskStream, iterate_batches, load_handles
from .learners import Learner, LearnerConfig

STATE_FORMAT_VERSION = 1
METRICS = {"val_accuracy": "max", "val_loss": "min"}
VALIDATION_SCOPES = ("current_task", "cumulative")
METRICS_HEADER = ["update_counter", "epoch", "metric_name", "value", "wall_time_s"]
COMPONENTS = ("model.spec.json", "model.ckpt", "optimizer.ckpt", "learner.json")


class StateError(Exception):
    pass


class UnsupportedVersionError(StateError):
    pass


class MissingComponentError(CorruptionError):
    pass


class StateLockedError(StateError):
    pass


def default_clock() -> Callable[[], float]:
    """Wall clock; ``RENGINE_CLOCK=frozen`` pins it to zero.

    The frozen clock makes ``wall_time_s`` columns reproducible, which is
    what bit-for-bit comparisons of logs across runs rely on.
    """
    if os.environ.get("RENGINE_CLOCK") == "frozen":
        return frozen_clock
    return time.time


def frozen_clock() -> float:
    return 0.0


# --------------------------------------------------------------------------
# configuration


@dataclass
class UpdateJobConfig:
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    learning_rate: float = 0.1
    momentum: float = 0.0
    weight_decay: float = 0.0
    batch_size: int = 32
    max_epochs: int = 5
    metric: str = "val_accuracy"
    mode: str | None = None
    seed: int = 0
    validation_scope: str = "current_task"

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}; known: {sorted(METRICS)}")
        if self.mode is None:
            self.mode = METRICS[self.metric]
        if self.mode not in ("min", "max"):
            raise ValueError("mode must be 'min' or 'max'")
        if self.validation_scope not in VALIDATION_SCOPES:
            raise ValueError(f"validation_scope must be one of {VALIDATION_SCOPES}")
        nn.OptimizerState.zeros(0, **self.optimizer_hyperparameters())

    def optimizer_hyperparameters(self) -> dict:
        return {
            "learning_rate": float(self.learning_rate),
            "momentum": float(self.momentum),
            "weight_decay": float(self.weight_decay),
        }

    def with_overrides(self, overrides: dict) -> "UpdateJobConfig":
        """Apply flat ``name -> value`` settings to job or learner fields."""
        job_fields = {f.name for f in fields(self)} - {"learner"}
        learner = self.learner.to_dict()
        job = {}
        for name, value in overrides.items():
            if name in job_fields:
                job[name] = value
            elif name in learner:
                learner[name] = value
            else:
                raise KeyError(f"{name!r} is not a tunable job or learner field")
        for name in ("batch_size", "max_epochs", "seed"):
            if name in job:
                job[name] = int(job[name])
        if "memory_batch_size" in overrides and learner["memory_batch_size"] is not None:
            learner["memory_batch_size"] = int(learner["memory_batch_size"])
        return replace(self, learner=LearnerConfig.from_dict(learner), **job)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "learner"}
        d["learner"] = self.learner.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UpdateJobConfig":
        d = dict(d)
        learner = LearnerConfig.from_dict(d.pop("learner", {}))
        return cls(learner=learner, **d)


# --------------------------------------------------------------------------
# state


@dataclass
class SessionState:
    spec: nn.ModelSpec
    params: np.ndarray
    optimizer: nn.OptimizerState
    learner: Learner
    update_counter: int = 0
    metrics_csv: str = ""
    hpo_history_csv: str = ""
    hpo_summary_csv: str = ""
    directory: Path | None = None
    state_format_version: int = STATE_FORMAT_VERSION

    def metric_rows(self) -> list[dict]:
        if not self.metrics_csv:
            return []
        return list(csv.DictReader(io.StringIO(self.metrics_csv)))


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def append_csv(text: str, header: Sequence[str], rows: Sequence[Sequence]) -> str:
    if not text:
        return _csv_text(header, rows)
    return text + _csv_text(header, rows).split("\n", 1)[1]


def _fmt(value) -> str:
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def _recover(target: Path) -> None:
    old = target.with_name(target.name + ".old")
    if not target.exists() and old.exists():
        os.replace(old, target)


def load_state(directory) -> SessionState:
    """Load and verify a state directory, rolling back an interrupted commit."""
    directory = Path(directory)
    _recover(directory)
    if not directory.is_dir():
        raise MissingComponentError("state directory does not exist", directory)
    version_file = directory / "version"
    if not version_file.exists():
        raise MissingComponentError("missing component 'version'", version_file)
    try:
        version = int(version_file.read_text().strip())
    except ValueError as exc:
        raise CorruptionError("unreadable version file", version_file) from exc
    if version != STATE_FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"state format version {version} is not supported (expected {STATE_FORMAT_VERSION})"
        )
    session_path = directory / "session.json"
    if not session_path.exists():
        raise MissingComponentError("missing component 'session.json'", session_path)
    session = verify_checksum(read_json(session_path), session_path)
    for name, digest in session["files"].items():
        path = directory / name
        if not path.exists():
            raise MissingComponentError(f"missing component {name!r}", path)
        if file_sha256(path) != digest:
            raise CorruptionError(f"checksum mismatch in {name}", path)

    spec = nn.ModelSpec.from_dict(json.loads((directory / "model.spec.json").read_text()))
    params = nn.load_params(directory / "model.ckpt", spec)
    momentum = nn.load_params(directory / "optimizer.ckpt", spec)
    optimizer = nn.OptimizerState(momentum, **session["optimizer"])
    learner = Learner.load(directory, spec.num_params)

    def text(name):
        p = directory / name
        return p.read_text() if p.exists() else ""

    return SessionState(
        spec=spec,
        params=params,
        optimizer=optimizer,
        learner=learner,
        update_counter=session["update_counter"],
        metrics_csv=text("metrics.csv"),
        hpo_history_csv=text("hpo_history.csv"),
        hpo_summary_csv=text("hpo_summary.csv"),
        directory=directory,
        state_format_version=version,
    )


def save_state(
    state: SessionState,
    directory,
    archive_previous: bool = False,
    fault_hook: Callable[[str], None] | None = None,
) -> SessionState:
    """Write ``state`` to ``directory`` atomically.

    The new tree is built in ``<dir>.tmp``, synced, then swapped in by
    renaming the old directory aside and the new one into place.
    ``load_state`` rolls back if a crash lands between the two renames.
    With ``archive_previous`` the replaced state is copied under
    ``history/<its update counter>/``. ``fault_hook`` is called with a stage
    name before each commit step (used for fault injection in tests).
    """
    target = Path(directory)
    _recover(target)
    tmp = target.with_name(target.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)

    (tmp / "version").write_text(f"{STATE_FORMAT_VERSION}\n")
    (tmp / "model.spec.json").write_bytes(canonical_json(state.spec.to_dict()))
    nn.save_params(tmp / "model.ckpt", state.params)
    nn.save_params(tmp / "optimizer.ckpt", state.optimizer.momentum_buffers)
    written = list(COMPONENTS[:3]) + state.learner.save(tmp)
    if state.learner.buffer is not None:
        shutil.copytree(state.learner.buffer.directory, tmp / "buffer")
        buf = RehearsalBuffer.load(tmp / "buffer")
        buf.save()
        written.append("buffer/manifest.json")
    for name, text in (
        ("metrics.csv", state.metrics_csv),
        ("hpo_history.csv", state.hpo_history_csv),
        ("hpo_summary.csv", state.hpo_summary_csv),
    ):
        if text:
            (tmp / name).write_text(text)
    session = {
        "state_format_version": STATE_FORMAT_VERSION,
        "update_counter": state.update_counter,
        "optimizer": state.optimizer.hyperparameters(),
        "files": {name: file_sha256(tmp / name) for name in written},
    }
    (tmp / "session.json").write_bytes(canonical_json(with_checksum(session)))

    if archive_previous and target.exists():
        if (target / "history").exists():
            shutil.copytree(target / "history", tmp / "history")
        prev = json.loads((target / "session.json").read_text())["update_counter"]
        shutil.copytree(
            target,
            tmp / "history" / str(prev),
            ignore=shutil.ignore_patterns("history", "lock"),
        )

    if fault_hook:
        fault_hook("before_sync")
    fsync_tree(tmp)
    if fault_hook:
        fault_hook("before_rename")
    if target.exists():
        old = target.with_name(target.name + ".old")
        if old.exists():
            shutil.rmtree(old)
        os.replace(target, old)
        if fault_hook:
            fault_hook("between_renames")
        os.replace(tmp, target)
        shutil.rmtree(old)
    else:
        os.replace(tmp, target)
    return load_state(target)


class StateLock:
    """Exclusive ``lock`` file holding the owner's PID; stale locks are broken."""

    def __init__(self, directory):
        self.path = Path(directory) / "lock"
        self.fd = None

    def __enter__(self):
        if not self.path.parent.exists():
            return self
        for _ in range(2):
            try:
                self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644)
                os.write(self.fd, f"{os.getpid()}\n".encode())
                return self
            except FileExistsError:
                try:
                    pid = int(self.path.read_text().strip() or 0)
                except (OSError, ValueError):
                    pid = 0
                if pid and pid != os.getpid() and _pid_alive(pid):
                    raise StateLockedError(f"{self.path.parent} is locked by process {pid}")
                self.path.unlink(missing_ok=True)
        raise StateLockedError(f"could not acquire {self.path}")

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            self.path.unlink(missing_ok=True)


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


# --------------------------------------------------------------------------
# training


def compute_metric(spec, params, x, y, metric: str) -> float:
    if len(y) == 0:
        raise ValueError("metric needs at least one validation example")
    logits = nn.forward(spec, params, x)
    if metric == "val_accuracy":
        return float(np.mean(np.argmax(logits, axis=1) == y))
    logp = nn.log_softmax(logits)
    return float(-logp[np.arange(len(y)), y].mean())


def _better(a: float, b: float | None, mode: str) -> bool:
    return b is None or (a > b if mode == "max" else a < b)


class UpdateRun:
    """Training of one update, resumable at epoch boundaries.

    ``workdir`` holds the run's private copy of the rehearsal buffer. When
    ``workdir/buffer`` already exists (seeded by a job runner) it is used
    as is; otherwise the prior state's buffer is copied there.
    """

    def __init__(
        self,
        prior: SessionState | None,
        stream: TaskStream,
        task_index: int,
        job: UpdateJobConfig,
        workdir,
        model_spec: nn.ModelSpec | None = None,
        clock: Callable[[], float] | None = None,
    ):
        self.stream = stream
        self.task_index = int(task_index)
        self.job = job
        self.workdir = Path(workdir)
        self.clock = clock or default_clock()
        if not 0 <= self.task_index < len(stream):
            raise IndexError(f"task index {task_index} outside stream of {len(stream)} tasks")
        self.workdir.mkdir(parents=True, exist_ok=True)

        cfg = job.learner
        if prior is None:
            if model_spec is None:
                raise ValueError("a fresh update needs a ModelSpec")
            self.spec = model_spec
            self.params = nn.init_params(model_spec)
            self.optimizer = nn.OptimizerState.zeros(model_spec.num_params, **job.optimizer_hyperparameters())
            self.counter = 1
            self.metrics_csv = ""
            self.hpo_history_csv = ""
            task_ids, anchor, fisher, prior_buffer = [], None, None, None
        else:
            self.spec = prior.spec
            self.params = prior.params.copy()
            self.optimizer = nn.OptimizerState(
                prior.optimizer.momentum_buffers.copy(), **job.optimizer_hyperparameters()
            )
            self.counter = prior.update_counter + 1
            self.metrics_csv = prior.metrics_csv
            self.hpo_history_csv = prior.hpo_history_csv
            task_ids = prior.learner.task_ids
            anchor, fisher = prior.learner.ewc_anchor, prior.learner.ewc_fisher
            prior_buffer = prior.learner.buffer
        if self.spec.input_dim != stream.feature_dim or self.spec.num_classes != stream.num_classes:
            raise nn.ShapeError(
                f"model maps {self.spec.input_dim} -> {self.spec.num_classes}, "
                f"data has {stream.feature_dim} features and {stream.num_classes} classes"
            )
        if cfg.strategy == "joint":
            self.params = nn.init_params(self.spec)
            self.optimizer = nn.OptimizerState.zeros(self.spec.num_params, **job.optimizer_hyperparameters())

        buffer = None
        if cfg.uses_buffer:
            bdir = self.workdir / "buffer"
            if bdir.exists():
                buffer = RehearsalBuffer.load(bdir)
            elif prior_buffer is not None:
                buffer = prior_buffer.copy_to(bdir)
            else:
                buffer = RehearsalBuffer.create(
                    bdir,
                    cfg.buffer_capacity,
                    self.spec.input_dim,
                    self.spec.num_classes,
                    stores_logits=cfg.stores_logits,
                    seed=job.seed,
                )
        self.learner = Learner(cfg, buffer, anchor, fisher, task_ids)

        task = stream[self.task_index]
        train_handles = [task.train]
        if cfg.strategy == "joint":
            seen = [t for t in task_ids if t != self.task_index]
            train_handles = [stream[t].train for t in seen] + [task.train]
        self.train_x, self.train_y = load_handles(train_handles)
        val_handles = [task.val]
        if job.validation_scope == "cumulative":
            val_handles = [stream[t].val for t in task_ids if t != self.task_index] + [task.val]
        self.val_x, self.val_y = load_handles(val_handles)
        if len(self.val_y) == 0:
            raise ValueError("no validation data: the target metric cannot be computed")

        self.epoch = 0
        self.history: list[tuple[int, float]] = []
        self.rows: list[list] = []
        self.best_epoch = None
        self.best_value = None
        self.best_params = self.params.copy()
        self.best_optimizer = self.optimizer.copy()
        self._t0 = self.clock()

    def train_epoch(self) -> float:
        job = self.job
        epoch = self.epoch + 1
        seed = [job.seed, self.counter, epoch]
        for b, batch in enumerate(iterate_batches(self.train_x, self.train_y, job.batch_size, seed)):
            rng = np.random.default_rng(seed + [b])
            _, grad = self.learner.training_step(self.spec, self.params, batch, rng)
            self.params, self.optimizer = nn.sgd_step(self.params, grad, self.optimizer)
            self.learner.on_batch_end(self.spec, self.params, batch, self.task_index)
        value = compute_metric(self.spec, self.params, self.val_x, self.val_y, job.metric)
        self.epoch = epoch
        self.history.append((epoch, value))
        self.rows.append([self.counter, epoch, job.metric, _fmt(value), _fmt(self.clock() - self._t0)])
        if _better(value, self.best_value, job.mode):
            self.best_epoch, self.best_value = epoch, value
            self.best_params = self.params.copy()
            self.best_optimizer = self.optimizer.copy()
        return value

    def train_until(self, epoch: int) -> list[tuple[int, float]]:
        epoch = min(epoch, self.job.max_epochs)
        out = []
        while self.epoch < epoch:
            out.append((self.epoch + 1, self.train_epoch()))
        return out

    def finalize(self) -> SessionState:
        """Close the task with the best-epoch parameters; nothing is written."""
        if self.epoch == 0:
            raise RuntimeError("finalize called before any training epoch")
        self.learner.on_task_end(
            self.spec,
            self.best_params,
            self.train_x,
            self.train_y,
            self.task_index,
            seed=[self.job.seed, self.counter],
        )
        state = SessionState(
            spec=self.spec,
            params=self.best_params.copy(),
            optimizer=self.best_optimizer.copy(),
            learner=self.learner,
            update_counter=self.counter,
            metrics_csv=self.metrics_csv,
            hpo_history_csv=self.hpo_history_csv,
        )
        row = {j: task_accuracy(state, self.stream, j) for j in sorted(set(self.learner.task_ids))}
        state.metrics_csv = append_csv(self.metrics_csv, METRICS_HEADER, self.rows + evaluation_rows(state, row))
        return state


def resolve_prior(prior) -> SessionState | None:
    if prior is None or isinstance(prior, SessionState):
        return prior
    return load_state(prior)


def run_update(
    prior,
    stream: TaskStream,
    task_index: int,
    job: UpdateJobConfig,
    out_dir,
    model_spec: nn.ModelSpec | None = None,
    archive_previous: bool = False,
    clock: Callable[[], float] | None = None,
) -> tuple[SessionState, list[tuple[int, float]]]:
    """Train on ``stream[task_index]`` and commit the new state to ``out_dir``.

    ``prior`` is a :class:`SessionState`, a state directory, or ``None`` for
    the very first update (then ``model_spec`` is required). Returns the
    committed state and the per-epoch ``(epoch, metric)`` values.
    """
    out_dir = Path(out_dir)
    lock_dir = prior if isinstance(prior, (str, os.PathLike)) else None
    with StateLock(lock_dir) if lock_dir else contextlib.nullcontext():
        prior = resolve_prior(prior)
        out_dir.parent.mkdir(parents=True, exist_ok=True)
        workdir = Path(tempfile.mkdtemp(prefix=out_dir.name + ".work-", dir=out_dir.parent))
        try:
            run = UpdateRun(prior, stream, task_index, job, workdir, model_spec, clock)
            run.train_until(job.max_epochs)
            state = run.finalize()
            state = save_state(state, out_dir, archive_previous=archive_previous)
        finally:
            shutil.rmtree(workdir, ignore_errors=True)
    return state, run.history


# --------------------------------------------------------------------------
# evaluation


@dataclass
class AccuracyMatrix:
    """``acc[t][j]``: accuracy on task ``j`` after update ``t`` (``j`` seen by ``t``)."""

    rows: dict[int, dict[int, float]] = field(default_factory=dict)

    def add(self, update: int, row: dict[int, float]) -> None:
        for v in row.values():
            if not 0.0 <= v <= 1.0:
                raise ValueError("accuracies must lie in [0, 1]")
        self.rows[int(update)] = {int(j): float(v) for j, v in row.items()}

    def summary(self, update: int | None = None) -> dict:
        if not self.rows:
            raise ValueError("empty accuracy matrix")
        t_last = max(self.rows) if update is None else update
        final = self.rows[t_last]
        forgetting = {}
        for j, acc in final.items():
            past = [r[j] for t, r in self.rows.items() if t <= t_last and j in r]
            forgetting[j] = max(past) - acc
        newest = max(final)
        older = [forgetting[j] for j in final if j != newest]
        return {
            "average_accuracy": float(np.mean(list(final.values()))),
            "forgetting": forgetting,
            "average_forgetting": float(np.mean(older)) if older else 0.0,
        }

    @classmethod
    def from_metric_rows(cls, rows: list[dict]) -> "AccuracyMatrix":
        m = cls()
        for r in rows:
            name = r["metric_name"]
            if name.startswith("test_accuracy/task_"):
                j = int(name.rsplit("_", 1)[1])
                m.rows.setdefault(int(r["update_counter"]), {})[j] = float(r["value"])
        return m


def task_accuracy(state: SessionState, stream: TaskStream, task_id: int) -> float:
    test = stream[task_id].test
    if test.num_examples == 0:
        raise ValueError(f"task {task_id} has no test split")
    x, y = test.load()
    return float(np.mean(np.argmax(nn.forward(state.spec, state.params, x), axis=1) == y))


def evaluate(state: SessionState, stream: TaskStream, history: AccuracyMatrix | None = None):
    """Test accuracy on every task the state has trained on.

    Returns ``(row, summary, matrix)``; previous rows come from ``history``
    or, when omitted, from the evaluation rows in the state's metrics log.
    """
    row = {j: task_accuracy(state, stream, j) for j in sorted(set(state.learner.task_ids))}
    matrix = AccuracyMatrix(dict(history.rows)) if history else AccuracyMatrix.from_metric_rows(state.metric_rows())
    matrix.add(state.update_counter, row)
    return row, matrix.summary(state.update_counter), matrix


def evaluation_rows(state: SessionState, row: dict[int, float]) -> list[list]:
    """metrics.csv rows for an evaluation (epoch 0 marks post-training evaluation)."""
    logged = {(r["update_counter"], r["metric_name"], r["value"]) for r in state.metric_rows()}
    rows = [[state.update_counter, 0, f"test_accuracy/task_{j}", _fmt(v), _fmt(0.0)] for j, v in row.items()]
    return [r for r in rows if (str(r[0]), r[2], r[3]) not in logged]
