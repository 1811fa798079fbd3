"""Per-update hyperparameter search with Asynchronous Successive Halving.

Trials train in segments that end at rung epochs ``r_min * eta**k``
(plus ``r_max``). At each rung the trial reports its metric and the
scheduler records it. A trial whose value is among the best
``ceil(n / eta)`` of the ``n`` values recorded at that rung so far is
promotable; otherwise it waits there and is reported as stopped unless a
later promotion picks it up. Whenever a worker is free the coordinator
promotes the best waiting promotable trial (highest rung first) or, failing
that, starts a fresh configuration.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import math
import pickle
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ._io import atomic_write_bytes
from .data import TaskStream
from .nn import ModelSpec
from .runner import JobSpec, LocalBackend, TERMINAL
from .updater import (
    SessionState,
    UpdateJobConfig,
    UpdateRun,
    default_clock,
    load_state,
    resolve_prior,
    save_state,
)

log = logging.getLogger(__name__)

SUMMARY_TAIL = ["epoch", "metric_name", "metric_value", "status", "rung", "wall_time_s"]


class HPOError(RuntimeError):
    def __init__(self, message: str, partial_csv: str = ""):
        super().__init__(message)
        self.partial_csv = partial_csv


# --------------------------------------------------------------------------
# config space


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"uniform needs lo < hi, got {self.lo}, {self.hi}")

    def sample(self, rng):
        return float(rng.uniform(self.lo, self.hi))

    def parse(self, text):
        v = float(text)
        if not self.lo <= v <= self.hi:
            raise ValueError(f"{v} outside [{self.lo}, {self.hi}]")
        return v


@dataclass(frozen=True)
class LogUniform(Uniform):
    def __post_init__(self):
        if not 0 < self.lo < self.hi:
            raise ValueError(f"loguniform needs 0 < lo < hi, got {self.lo}, {self.hi}")

    def sample(self, rng):
        return float(math.exp(rng.uniform(math.log(self.lo), math.log(self.hi))))


@dataclass(frozen=True)
class RandInt:
    lo: int
    hi: int

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError(f"randint needs lo <= hi, got {self.lo}, {self.hi}")

    def sample(self, rng):
        return int(rng.integers(self.lo, self.hi, endpoint=True))

    def parse(self, text):
        v = int(float(text))
        if not self.lo <= v <= self.hi:
            raise ValueError(f"{v} outside [{self.lo}, {self.hi}]")
        return v


@dataclass(frozen=True)
class Choice:
    values: tuple

    def __post_init__(self):
        if not self.values:
            raise ValueError("choice needs at least one value")
        object.__setattr__(self, "values", tuple(self.values))

    def sample(self, rng):
        return self.values[int(rng.integers(len(self.values)))]

    def parse(self, text):
        for v in self.values:
            if _cell(v) == text:
                return v
        raise ValueError(f"{text!r} is not one of {self.values}")


@dataclass(frozen=True)
class Fixed:
    value: object

    def sample(self, rng):
        return self.value

    def parse(self, text):
        if text != _cell(self.value):
            raise ValueError(f"{text!r} differs from the fixed value {self.value!r}")
        return self.value


_DIM_TYPES = {"uniform": Uniform, "loguniform": LogUniform, "randint": RandInt}


def parse_dim(spec):
    """``{"loguniform": [1e-4, 1e-1]}``, ``{"choice": [...]}``, ``{"fixed": v}`` or a bare value."""
    if isinstance(spec, dict):
        if len(spec) != 1:
            raise ValueError(f"dimension spec must have exactly one key, got {sorted(spec)}")
        (kind, arg), = spec.items()
        if kind in _DIM_TYPES:
            lo, hi = arg
            return _DIM_TYPES[kind](lo, hi)
        if kind == "choice":
            return Choice(tuple(arg))
        if kind == "fixed":
            return Fixed(arg)
        raise ValueError(f"unknown dimension type {kind!r}")
    return Fixed(spec)


@dataclass
class ConfigSpace:
    dims: dict

    def __post_init__(self):
        self.dims = {name: d if hasattr(d, "sample") else parse_dim(d) for name, d in self.dims.items()}

    @property
    def names(self) -> list[str]:
        return list(self.dims)

    def sample(self, rng: np.random.Generator) -> dict:
        return {name: dim.sample(rng) for name, dim in self.dims.items()}

    @property
    def is_fixed(self) -> bool:
        return all(isinstance(d, Fixed) for d in self.dims.values())


def sample_config(space: ConfigSpace, rng: np.random.Generator) -> dict:
    return space.sample(rng)


def _cell(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


# --------------------------------------------------------------------------
# ASHA bookkeeping


class Decision(str, enum.Enum):
    PROMOTABLE = "promotable"
    STOP = "stop"
    COMPLETE = "complete"


@dataclass
class SchedulerState:
    r_max: int
    eta: int = 3
    r_min: int = 1
    metric: str = "val_accuracy"
    mode: str = "max"
    records: dict = field(default_factory=dict)
    promoted: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.eta < 2:
            raise ValueError("eta must be >= 2")
        if self.r_min < 1 or self.r_max < self.r_min:
            raise ValueError("need 1 <= r_min <= r_max")
        for r in self.report_epochs:
            self.records.setdefault(r, [])
            self.promoted.setdefault(r, set())

    @property
    def rungs(self) -> list[int]:
        out, r = [], self.r_min
        while r <= self.r_max:
            out.append(r)
            r *= self.eta
        return out

    @property
    def report_epochs(self) -> list[int]:
        rungs = self.rungs
        return rungs if rungs[-1] == self.r_max else rungs + [self.r_max]

    def next_epoch(self, epoch: int) -> int | None:
        later = [r for r in self.report_epochs if r > epoch]
        return later[0] if later else None

    def ranked(self, epoch: int) -> list[tuple[int, float]]:
        """Records at a rung, best first; ties go to the lower trial id."""
        sign = -1.0 if self.mode == "max" else 1.0
        return sorted(self.records[epoch], key=lambda r: (sign * r[1], r[0]))

    def top(self, epoch: int) -> list[int]:
        ranked = self.ranked(epoch)
        return [tid for tid, _ in ranked[: math.ceil(len(ranked) / self.eta)]]

    def promotable(self, epoch: int) -> list[int]:
        return [tid for tid in self.top(epoch) if tid not in self.promoted[epoch]]


def asha_decide(sched: SchedulerState, trial_id: int, epoch: int, value: float) -> Decision:
    """Record a rung report and classify the trial against the records so far."""
    if epoch not in sched.records:
        raise ValueError(f"epoch {epoch} is not a rung (rungs: {sched.report_epochs})")
    if any(tid == trial_id for tid, _ in sched.records[epoch]):
        raise ValueError(f"trial {trial_id} already reported at epoch {epoch}")
    if not math.isfinite(value):
        raise ValueError("reported metric must be finite")
    sched.records[epoch].append((trial_id, float(value)))
    if epoch >= sched.r_max:
        return Decision.COMPLETE
    return Decision.PROMOTABLE if trial_id in sched.top(epoch) else Decision.STOP


# --------------------------------------------------------------------------
# trials


@dataclass
class TrialRecord:
    trial_id: int
    config: dict
    reports: list = field(default_factory=list)
    status: str = "running"
    rung_reached: int = 0
    checkpoint_dir: str = ""
    epoch: int = 0

    def best(self, mode: str):
        if not self.reports:
            return None
        pick = max if mode == "max" else min
        return pick(r[1] for r in self.reports)


@dataclass
class SearchResult:
    trials: list[TrialRecord]
    best_trial: TrialRecord
    summary_csv: str
    scheduler: SchedulerState


def summary_csv(trials, space_names, metric, sched: SchedulerState, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trial_id", *space_names, *SUMMARY_TAIL])
    by_id = {t.trial_id: t for t in trials}
    epochs = sched.report_epochs
    for tid, epoch, value, wall in rows:
        t = by_id[tid]
        w.writerow(
            [tid, *(_cell(t.config[n]) for n in space_names), epoch, metric, _cell(value), t.status, epochs.index(epoch), _cell(wall)]
        )
    return buf.getvalue()


def asha_search(
    space: ConfigSpace,
    trainable: str,
    workdir,
    *,
    r_max: int,
    metric: str = "val_accuracy",
    mode: str = "max",
    eta: int = 3,
    r_min: int = 1,
    max_trials: int | None = None,
    max_time: float | None = None,
    backend=None,
    seed: int = 0,
    initial_configs: list[dict] | None = None,
    input_state_dir=None,
    payload: dict | None = None,
    schedule: str = "asha",
    clock: Callable[[], float] | None = None,
    on_report: Callable | None = None,
) -> SearchResult:
    """Run ASHA over ``space`` with ``trainable`` (a ``"module:function"`` path).

    ``schedule="asha"`` promotes before starting new trials (highest rung
    first). ``schedule="cohort"`` starts every budgeted trial first and then
    promotes lowest rung first, which with one worker replays synchronous
    successive halving.
    """
    if max_trials is None and max_time is None:
        raise ValueError("give max_trials and/or max_time")
    if schedule not in ("asha", "cohort"):
        raise ValueError("schedule must be 'asha' or 'cohort'")
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    clock = clock or default_clock()
    backend = backend or LocalBackend(1)
    sched = SchedulerState(r_max=r_max, eta=eta, r_min=r_min, metric=metric, mode=mode)
    rng = np.random.default_rng(seed)
    queue = [dict(c) for c in (initial_configs or [])]
    trials: dict[int, TrialRecord] = {}
    waiting: dict[int, int] = {}  # trial_id -> rung epoch it waits at
    active = {}  # handle -> trial
    rows: list[tuple] = []
    failures = 0
    t0 = clock()

    def budget_left() -> bool:
        if max_time is not None and clock() - t0 >= max_time:
            return False
        return True

    def can_start_new() -> bool:
        started = sum(1 for t in trials.values() if t.status != "failed")
        if max_trials is not None and (started >= max_trials or failures >= max_trials):
            return False
        return budget_left()

    def promotion():
        epochs = sched.report_epochs[:-1]
        order = reversed(epochs) if schedule == "asha" else epochs
        for e in order:
            for tid in sched.promotable(e):
                if waiting.get(tid) == e:
                    return tid, e
        return None

    def new_trial():
        tid = len(trials)
        config = queue.pop(0) if queue else space.sample(rng)
        t = TrialRecord(tid, config, checkpoint_dir=str(workdir / f"trial_{tid:04d}"))
        trials[tid] = t
        return t

    def submit(t: TrialRecord, target: int):
        job = JobSpec(
            trial_id=t.trial_id,
            config=t.config,
            working_dir=t.checkpoint_dir,
            rungs=[target],
            trainable=trainable,
            input_state_dir=None if input_state_dir is None else str(input_state_dir),
            metric=metric,
            payload=payload or {},
        )
        t.status = "running"
        active[backend.submit(job)] = t

    def next_job() -> bool:
        if not budget_left():
            return False
        promo = promotion() if (schedule == "asha" or not can_start_new()) else None
        if promo is not None:
            tid, e = promo
            sched.promoted[e].add(tid)
            del waiting[tid]
            submit(trials[tid], sched.next_epoch(e))
            return True
        if can_start_new():
            submit(new_trial(), sched.report_epochs[0])
            return True
        return False

    while True:
        while len(backend.running) < getattr(backend, "workers", 1) and next_job():
            pass
        if not active:
            break
        progressed = False
        for handle in list(active):
            t = active[handle]
            status, new = backend.poll(handle)
            for rep in new:
                epoch, value = rep["epoch"], rep["value"]
                decision = asha_decide(sched, t.trial_id, epoch, value)
                t.reports.append((epoch, value))
                t.epoch = epoch
                t.rung_reached = sched.report_epochs.index(epoch)
                rows.append((t.trial_id, epoch, value, clock() - t0))
                if on_report:
                    on_report(t, epoch, value, decision)
                if decision == Decision.COMPLETE:
                    t.status = "completed"
                else:
                    t.status = "paused"
                    waiting[t.trial_id] = epoch
                progressed = True
            if status in TERMINAL:
                del active[handle]
                progressed = True
                if status == "failed":
                    t.status = "failed"
                    waiting.pop(t.trial_id, None)
                    failures += 1
                    log.warning("trial %d failed: %s", t.trial_id, handle.error)
        if not progressed:
            backend.wait_any()

    for t in trials.values():
        if t.status in ("paused", "running"):
            t.status = "stopped"
    ordered = [trials[k] for k in sorted(trials)]
    csv_text = summary_csv(ordered, space.names, metric, sched, rows)
    scored = [t for t in ordered if t.reports]
    if not scored:
        raise HPOError("no trial produced a metric within the budget", csv_text)
    sign = -1.0 if mode == "max" else 1.0
    best = min(scored, key=lambda t: (sign * t.best(mode), t.trial_id))
    return SearchResult(ordered, best, csv_text, sched)


# --------------------------------------------------------------------------
# warm start


def warm_start(history_csv: str, space: ConfigSpace, k: int, mode: str = "max", metric: str | None = None) -> list[dict]:
    """Top-``k`` distinct configurations of the most recent update in ``history_csv``.

    An incompatible history logs a warning and yields no configurations.
    """
    if k <= 0 or not history_csv.strip():
        return []
    rows = list(csv.DictReader(io.StringIO(history_csv)))
    needed = set(space.names) | {"trial_id", "metric_value"}
    if not rows or not needed <= set(rows[0]):
        log.warning("HPO history lacks columns %s; sampling from scratch", sorted(needed - set(rows[0] if rows else {})))
        return []
    if "update_counter" in rows[0]:
        last = max(int(r["update_counter"]) for r in rows)
        rows = [r for r in rows if int(r["update_counter"]) == last]
    if metric is not None and any(r.get("metric_name", metric) != metric for r in rows):
        log.warning("HPO history tracks a different metric; sampling from scratch")
        return []
    best: dict[int, float] = {}
    configs: dict[int, dict] = {}
    sign = -1.0 if mode == "max" else 1.0
    try:
        for r in rows:
            tid = int(r["trial_id"])
            v = float(r["metric_value"])
            if tid not in best or sign * v < sign * best[tid]:
                best[tid] = v
            if tid not in configs:
                configs[tid] = {n: space.dims[n].parse(r[n]) for n in space.names}
    except (ValueError, KeyError) as exc:
        log.warning("HPO history incompatible with the config space (%s); sampling from scratch", exc)
        return []
    out, keys = [], set()
    for tid in sorted(best, key=lambda t: (sign * best[t], t)):
        key = json.dumps(configs[tid], sort_keys=True, default=str)
        if key in keys:
            continue
        keys.add(key)
        out.append(configs[tid])
        if len(out) == k:
            break
    return out


def append_history(history_csv: str, summary: str, update_counter: int) -> str:
    """Concatenate a run summary onto the history, widening columns as needed."""
    old = list(csv.DictReader(io.StringIO(history_csv))) if history_csv.strip() else []
    new = list(csv.DictReader(io.StringIO(summary)))
    for r in new:
        r["update_counter"] = str(update_counter)
    header = ["update_counter", "trial_id"]
    for r in old + new:
        for name in r:
            if name not in header and name not in SUMMARY_TAIL:
                header.append(name)
    header += SUMMARY_TAIL
    buf = io.StringIO()
    w = csv.DictWriter(buf, header, restval="", lineterminator="\n")
    w.writeheader()
    w.writerows(old + new)
    return buf.getvalue()


# --------------------------------------------------------------------------
# model-update trials


def update_trainable(job: JobSpec, ctx) -> None:
    """Train one segment of an update trial, resuming from ``progress.pkl``."""
    wd = Path(job.working_dir)
    progress = wd / "progress.pkl"
    if progress.exists():
        run = pickle.loads(progress.read_bytes())
    else:
        p = job.payload
        prior = load_state(job.input_state_dir) if job.input_state_dir else None
        cfg = UpdateJobConfig.from_dict(p["job"]).with_overrides(job.config)
        spec = ModelSpec.from_dict(p["model_spec"]) if p.get("model_spec") else None
        run = UpdateRun(prior, TaskStream.from_dict(p["stream"]), p["task_index"], cfg, wd, spec)
    for target in job.rungs:
        run.train_until(target)
        atomic_write_bytes(progress, pickle.dumps(run))
        ctx.report(run.epoch, run.history[-1][1])
        if ctx.should_stop():
            break


@dataclass
class HPOResult:
    state: SessionState
    trials: list[TrialRecord]
    best_trial: TrialRecord
    summary_csv: str


def run_hpo(
    prior,
    stream: TaskStream,
    task_index: int,
    job: UpdateJobConfig,
    space: ConfigSpace,
    out_dir,
    *,
    model_spec: ModelSpec | None = None,
    max_trials: int | None = None,
    max_time: float | None = None,
    workers: int = 1,
    backend=None,
    eta: int = 3,
    r_min: int = 1,
    seed: int = 0,
    warm_start_k: int = 0,
    workdir=None,
    archive_previous: bool = False,
    clock: Callable[[], float] | None = None,
    schedule: str = "asha",
) -> HPOResult:
    """Tune one model update and commit the best trial's state to ``out_dir``.

    ``prior`` must be a saved state (directory or loaded state with a
    directory) or ``None``; every trial starts from a private copy of it.
    """
    prior = resolve_prior(prior)
    if prior is not None and prior.directory is None:
        raise ValueError("HPO needs the prior state on disk; save it first")
    out_dir = Path(out_dir)
    workdir = Path(workdir) if workdir else out_dir.with_name(out_dir.name + ".hpo")
    run_dir = workdir / f"update_{(prior.update_counter if prior else 0) + 1:04d}"
    if run_dir.exists():
        shutil.rmtree(run_dir)
    initial = []
    if warm_start_k and prior is not None:
        initial = warm_start(prior.hpo_history_csv, space, warm_start_k, job.mode, job.metric)
    for name in space.names:
        job.with_overrides({name: space.dims[name].sample(np.random.default_rng(0))})
    payload = {
        "job": job.to_dict(),
        "model_spec": model_spec.to_dict() if model_spec else None,
        "stream": stream.to_dict(),
        "task_index": task_index,
    }
    result = asha_search(
        space,
        "rengine.hpo:update_trainable",
        run_dir,
        r_max=job.max_epochs,
        metric=job.metric,
        mode=job.mode,
        eta=eta,
        r_min=r_min,
        max_trials=max_trials,
        max_time=max_time,
        backend=backend or LocalBackend(workers),
        seed=seed,
        initial_configs=initial,
        input_state_dir=None if prior is None else prior.directory,
        payload=payload,
        schedule=schedule,
        clock=clock,
    )
    best = result.best_trial
    run: UpdateRun = pickle.loads((Path(best.checkpoint_dir) / "progress.pkl").read_bytes())
    state = run.finalize()
    state.hpo_summary_csv = result.summary_csv
    state.hpo_history_csv = append_history(state.hpo_history_csv, result.summary_csv, state.update_counter)
    state = save_state(state, out_dir, archive_previous=archive_previous)
    return HPOResult(state, result.trials, best, result.summary_csv)
