"""Trial execution backends.

A job lives in its own working directory. The directory doubles as the
communication channel, so every backend speaks the same file contract:

``job.json``
    The job descriptor (:class:`JobSpec` as JSON).
``reports.jsonl``
    One JSON object per reached rung: ``trial_id, epoch, metric, value,
    wall_time_s``. Lines are appended in epoch order.
``status.json``
    ``{"status": "running" | "completed" | "stopped" | "failed", ...}``,
    rewritten atomically by the executing job.
``cancel``
    Created by the coordinator; the job stops at its next rung boundary.

:class:`LocalBackend` runs up to ``W`` jobs at once in threads or worker
processes. :class:`RemoteBackend` drops descriptors into a spool
directory for an external agent, which executes them with
``python -m rengine.runner <job_dir>``.
"""

from __future__ import annotations

import importlib
import json
import multiprocessing
import shutil
import sys
import threading
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ._io import atomic_write_bytes
from .updater import default_clock

TERMINAL = ("completed", "stopped", "failed")


@dataclass
class JobSpec:
    trial_id: int
    config: dict
    working_dir: str
    rungs: list[int]
    trainable: str
    input_state_dir: str | None = None
    metric: str = "val_accuracy"
    payload: dict = field(default_factory=dict)

    def to_json(self) -> bytes:
        return (json.dumps(asdict(self), sort_keys=True, indent=1) + "\n").encode()

    @classmethod
    def from_file(cls, path) -> "JobSpec":
        return cls(**json.loads(Path(path).read_text()))


class JobContext:
    """Handed to a trainable: report at rungs, check for cancellation."""

    def __init__(self, job: JobSpec, clock=None):
        self.job = job
        self.dir = Path(job.working_dir)
        self.clock = clock or default_clock()
        self._t0 = self.clock()
        self.reported: list[int] = []

    def report(self, epoch: int, value: float) -> None:
        if self.reported and epoch <= self.reported[-1]:
            raise ValueError("reports must have strictly increasing epochs")
        line = {
            "trial_id": self.job.trial_id,
            "epoch": int(epoch),
            "metric": self.job.metric,
            "value": float(value),
            "wall_time_s": float(self.clock() - self._t0),
        }
        with open(self.dir / "reports.jsonl", "a") as fh:
            fh.write(json.dumps(line) + "\n")
            fh.flush()
        self.reported.append(int(epoch))

    def should_stop(self) -> bool:
        return (self.dir / "cancel").exists()


def _write_status(job_dir: Path, status: str, **extra) -> None:
    doc = {"status": status, **extra}
    atomic_write_bytes(job_dir / "status.json", (json.dumps(doc, sort_keys=True) + "\n").encode())


def _resolve(path: str):
    module, _, name = path.partition(":")
    return getattr(importlib.import_module(module), name)


def execute_job(job_dir) -> str:
    """Run the job described in ``job_dir/job.json``; returns its final status."""
    job_dir = Path(job_dir)
    job = JobSpec.from_file(job_dir / "job.json")
    _write_status(job_dir, "running")
    ctx = JobContext(job)
    try:
        _resolve(job.trainable)(job, ctx)
    except Exception as exc:
        _write_status(job_dir, "failed", error=f"{type(exc).__name__}: {exc}", traceback=traceback.format_exc())
        return "failed"
    done = bool(ctx.reported) and ctx.reported[-1] >= job.rungs[-1]
    status = "completed" if done or not ctx.should_stop() else "stopped"
    _write_status(job_dir, status)
    return status


class JobHandle:
    def __init__(self, job: JobSpec):
        self.job = job
        self.dir = Path(job.working_dir)
        self.status = "queued"
        self.reports: list[dict] = []
        self.error: str | None = None
        self._offset = 0
        self._worker = None

    @property
    def trial_id(self) -> int:
        return self.job.trial_id

    def __repr__(self):
        return f"JobHandle(trial={self.trial_id}, status={self.status})"


class Backend:
    """Common bookkeeping: handles, report tailing, status files."""

    def __init__(self):
        self.handles: list[JobHandle] = []

    def _prepare_dir(self, job: JobSpec) -> JobHandle:
        handle = JobHandle(job)
        handle.dir.mkdir(parents=True, exist_ok=True)
        for name in ("status.json", "cancel"):
            (handle.dir / name).unlink(missing_ok=True)
        handle._offset = _size(handle.dir / "reports.jsonl")
        atomic_write_bytes(handle.dir / "job.json", job.to_json())
        self.handles.append(handle)
        return handle

    def _known(self, handle: JobHandle):
        if handle not in self.handles:
            raise KeyError(f"unknown job handle {handle!r}")

    def _tail(self, handle: JobHandle) -> list[dict]:
        path = handle.dir / "reports.jsonl"
        if not path.exists():
            return []
        with open(path, "rb") as fh:
            fh.seek(handle._offset)
            data = fh.read()
        complete = data[: data.rfind(b"\n") + 1]
        handle._offset += len(complete)
        new = [json.loads(line) for line in complete.splitlines() if line.strip()]
        handle.reports.extend(new)
        return new

    def _read_status(self, handle: JobHandle) -> str | None:
        path = handle.dir / "status.json"
        if not path.exists():
            return None
        doc = json.loads(path.read_text())
        if doc["status"] == "failed":
            handle.error = doc.get("error")
        return doc["status"]

    def cancel(self, handle: JobHandle) -> None:
        """Ask a job to stop at its next rung boundary; no-op once terminal."""
        self._known(handle)
        if handle.status in TERMINAL:
            return
        if handle.status == "queued":
            handle.status = "stopped"
            _write_status(handle.dir, "stopped")
            return
        (handle.dir / "cancel").touch()


def _size(path: Path) -> int:
    return path.stat().st_size if path.exists() else 0


def _seed_buffer(job: JobSpec) -> None:
    """Copy-on-start: give the job a private copy of the input buffer."""
    if not job.input_state_dir:
        return
    src = Path(job.input_state_dir) / "buffer"
    dst = Path(job.working_dir) / "buffer"
    if src.exists() and not dst.exists():
        tmp = dst.with_name("buffer.copying")
        shutil.rmtree(tmp, ignore_errors=True)
        shutil.copytree(src, tmp)
        tmp.rename(dst)


class LocalBackend(Backend):
    """Run at most ``workers`` jobs concurrently on this machine.

    ``executor="thread"`` runs jobs in threads of this process;
    ``executor="process"`` forks one worker process per job, which can be
    killed independently (the job is then reported as failed).
    """

    def __init__(self, workers: int = 1, executor: str = "thread"):
        super().__init__()
        if workers < 1:
            raise ValueError("workers must be >= 1")
        if executor not in ("thread", "process"):
            raise ValueError("executor must be 'thread' or 'process'")
        self.workers = workers
        self.executor = executor
        self._queue: list[JobHandle] = []
        self._ctx = multiprocessing.get_context("fork") if executor == "process" else None

    def submit(self, job: JobSpec) -> JobHandle:
        handle = self._prepare_dir(job)
        try:
            _seed_buffer(job)
        except OSError as exc:
            handle.status = "failed"
            handle.error = f"copy-on-start failed: {exc}"
            _write_status(handle.dir, "failed", error=handle.error)
            return handle
        self._queue.append(handle)
        self._dispatch()
        return handle

    @property
    def running(self) -> list[JobHandle]:
        return [h for h in self.handles if h.status == "running"]

    def _dispatch(self) -> None:
        while self._queue and len(self.running) < self.workers:
            handle = self._queue.pop(0)
            if handle.status != "queued":
                continue
            handle.status = "running"
            if self.executor == "thread":
                worker = threading.Thread(target=execute_job, args=(handle.dir,), daemon=True)
            else:
                worker = self._ctx.Process(target=_process_entry, args=(str(handle.dir),), daemon=True)
            handle._worker = worker
            worker.start()

    def _alive(self, handle: JobHandle) -> bool:
        return handle._worker is not None and handle._worker.is_alive()

    def poll(self, handle: JobHandle) -> tuple[str, list[dict]]:
        """Current status and any reports not returned by earlier polls."""
        self._known(handle)
        if handle.status == "running":
            alive = self._alive(handle)
            status = self._read_status(handle)
            if status in TERMINAL:
                handle.status = status
            elif not alive:
                handle.status = "failed"
                code = getattr(handle._worker, "exitcode", None)
                handle.error = f"worker exited without finishing (exit code {code})"
                _write_status(handle.dir, "failed", error=handle.error)
        new = self._tail(handle)
        if handle.status in TERMINAL and handle._worker is not None:
            handle._worker.join(timeout=5)
        self._dispatch()
        return handle.status, new

    def kill(self, handle: JobHandle) -> None:
        """Hard-kill a process worker (fault injection and emergency stop)."""
        if self.executor != "process":
            raise RuntimeError("only process workers can be killed")
        if handle._worker is not None and handle._worker.is_alive():
            handle._worker.kill()
            handle._worker.join()

    def wait_any(self, timeout: float = 0.01) -> None:
        time.sleep(timeout)


def _process_entry(job_dir: str) -> None:
    status = execute_job(job_dir)
    sys.exit(0 if status != "failed" else 1)


class RemoteBackend(Backend):
    """File-spool backend for an external executor.

    ``submit`` writes the job descriptor into the job's working directory
    and places a pointer file ``<spool>/<trial>-<n>.job`` naming it. A
    remote agent picks up pointer files, runs ``execute_job`` on the named
    directory (``python -m rengine.runner <job_dir>``), and the usual
    ``reports.jsonl`` / ``status.json`` files flow back through shared
    storage. No cloud client ships with this package.
    """

    def __init__(self, spool_dir):
        super().__init__()
        self.spool = Path(spool_dir)
        self.spool.mkdir(parents=True, exist_ok=True)
        self._n = 0

    def submit(self, job: JobSpec) -> JobHandle:
        handle = self._prepare_dir(job)
        _seed_buffer(job)
        self._n += 1
        atomic_write_bytes(self.spool / f"{job.trial_id}-{self._n}.job", str(handle.dir.resolve()).encode())
        handle.status = "running"
        return handle

    def poll(self, handle: JobHandle) -> tuple[str, list[dict]]:
        self._known(handle)
        if handle.status == "running":
            status = self._read_status(handle)
            if status in TERMINAL:
                handle.status = status
        return handle.status, self._tail(handle)

    @property
    def running(self) -> list[JobHandle]:
        return [h for h in self.handles if h.status == "running"]

    def wait_any(self, timeout: float = 0.05) -> None:
        time.sleep(timeout)


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit("usage: python -m rengine.runner <job_dir>")
    sys.exit(0 if execute_job(sys.argv[1]) != "failed" else 1)
