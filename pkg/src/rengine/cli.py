"""Command-line entry points.

Exit codes: 0 success, 1 unexpected error, 2 invalid job file or usage,
3 I/O failure, 4 missing or corrupt state, 5 HPO budget produced no
evaluated trial. Summaries go to stdout as ``key=value`` lines,
diagnostics to stderr.

Job file (YAML or JSON) top-level keys::

    scenario      source / kind / val_fraction / seed (see ScenarioSpec.from_dict)
    model         hidden_dims, activation, seed, registered_hyperparameters
    learner       strategy, memory_batch_size, er_weight, alpha, beta, lambda,
                  buffer_capacity, fisher_samples
    optimizer     learning_rate, momentum, weight_decay
    training      batch_size, max_epochs, metric, mode, validation_scope
    seed          integer seed for training and the buffer
    config_space  name -> {uniform|loguniform|randint: [lo, hi]} | {choice: [...]} | {fixed: v}
    hpo           max_trials, max_time, eta, r_min, warm_start_k, schedule
    backend       kind (local|remote), workers, executor, spool
    paths         data_dir, work_dir

A field may be fixed in its section or listed in ``config_space``, not both.
``RENGINE_WORKERS`` overrides ``backend.workers``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ._io import CorruptionError, atomic_write_bytes, canonical_json
from .data import ScenarioSpec, TaskStream, prepare_data, setup
from .hpo import ConfigSpace, HPOError, run_hpo
from .learners import LearnerConfig
from .nn import ModelSpec
from .runner import LocalBackend, RemoteBackend
from .updater import (
    AccuracyMatrix,
    METRICS_HEADER,
    StateError,
    StateLock,
    UpdateJobConfig,
    append_csv,
    evaluate,
    evaluation_rows,
    load_state,
    run_update,
)

EXIT_OK, EXIT_ERROR, EXIT_JOBFILE, EXIT_IO, EXIT_STATE, EXIT_HPO = 0, 1, 2, 3, 4, 5

SECTIONS = {
    "scenario": {"source", "kind", "val_fraction", "seed"},
    "model": {"hidden_dims", "activation", "seed", "registered_hyperparameters"},
    "learner": set(LearnerConfig().to_dict()),
    "optimizer": {"learning_rate", "momentum", "weight_decay"},
    "training": {"batch_size", "max_epochs", "metric", "mode", "validation_scope"},
    "seed": None,
    "config_space": None,
    "hpo": {"max_trials", "max_time", "eta", "r_min", "warm_start_k", "schedule"},
    "backend": {"kind", "workers", "executor", "spool"},
    "paths": {"data_dir", "work_dir"},
}
TUNABLE = SECTIONS["learner"] | SECTIONS["optimizer"] | {"batch_size"}


class JobFileError(ValueError):
    pass


@dataclass
class JobFile:
    scenario: ScenarioSpec
    model: dict
    job: UpdateJobConfig
    space: ConfigSpace | None
    hpo: dict = field(default_factory=dict)
    backend: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    def model_spec(self, feature_dim: int, num_classes: int) -> ModelSpec:
        dims = [feature_dim, *self.model.get("hidden_dims", [64]), num_classes]
        return ModelSpec(
            dims,
            activation=self.model.get("activation", "relu"),
            seed=self.model.get("seed", 0),
            registered_hyperparameters=dict(self.model.get("registered_hyperparameters", {})),
        )

    @property
    def data_dir(self) -> Path:
        if "data_dir" not in self.paths:
            raise JobFileError("paths.data_dir is required")
        return Path(self.paths["data_dir"])


def load_jobfile(path) -> JobFile:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise JobFileError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise JobFileError("job file must be a mapping")
    for key, value in doc.items():
        if key not in SECTIONS:
            raise JobFileError(f"unknown key {key!r}")
        allowed = SECTIONS[key]
        if allowed is not None:
            if not isinstance(value, dict):
                raise JobFileError(f"{key!r} must be a mapping")
            for sub in value:
                if sub not in allowed:
                    raise JobFileError(f"unknown key '{key}.{sub}'")
    if "scenario" not in doc:
        raise JobFileError("missing key 'scenario'")
    space_doc = doc.get("config_space") or {}
    for name in space_doc:
        if name not in TUNABLE:
            raise JobFileError(f"config_space key {name!r} is not tunable")
        for section in ("learner", "optimizer", "training"):
            if name in (doc.get(section) or {}):
                raise JobFileError(f"{name!r} is both fixed in '{section}' and listed in config_space")
    try:
        scenario = ScenarioSpec.from_dict(doc["scenario"])
        job = UpdateJobConfig(
            learner=LearnerConfig.from_dict(doc.get("learner") or {}),
            seed=int(doc.get("seed", 0)),
            **(doc.get("optimizer") or {}),
            **(doc.get("training") or {}),
        )
        space = ConfigSpace(dict(space_doc)) if space_doc else None
    except (TypeError, ValueError, KeyError) as exc:
        raise JobFileError(str(exc)) from exc
    paths = {k: str(Path(v)) for k, v in (doc.get("paths") or {}).items()}
    return JobFile(scenario, doc.get("model") or {}, job, space, doc.get("hpo") or {}, doc.get("backend") or {}, paths)


def _stream(jf: JobFile) -> TaskStream:
    prepare_data(jf.scenario, jf.data_dir)
    return setup(jf.scenario, jf.data_dir, jf.scenario.seed)


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


# --------------------------------------------------------------------------
# commands


def cmd_make_scenario(args) -> int:
    jf = load_jobfile(args.spec)
    out = Path(args.out)
    prepare_data(jf.scenario, out)
    stream = setup(jf.scenario, out, jf.scenario.seed)
    data = canonical_json(stream.to_dict())
    target = out / "stream.json"
    if not target.exists() or target.read_bytes() != data:
        atomic_write_bytes(target, data)
    print(f"tasks={len(stream)} out={out}")
    return EXIT_OK


def _backend(jf: JobFile):
    cfg = jf.backend
    if cfg.get("kind", "local") == "remote":
        if "spool" not in cfg:
            raise JobFileError("backend.spool is required for the remote backend")
        return RemoteBackend(cfg["spool"])
    workers = int(os.environ.get("RENGINE_WORKERS", cfg.get("workers", 1)))
    return LocalBackend(workers, cfg.get("executor", "thread"))


def cmd_update(args) -> int:
    jf = load_jobfile(args.job)
    state_dir = Path(args.state_dir)
    t = args.task_index
    exists = (state_dir / "session.json").exists() or state_dir.with_name(state_dir.name + ".old").exists()
    if t > 0 and not exists:
        _err(f"no state at {state_dir}; task {t} needs the state of the previous update")
        return EXIT_STATE
    prior = None
    if exists:
        try:
            prior = load_state(state_dir)
        except (CorruptionError, StateError) as exc:
            _err(f"refusing to update from a corrupt state: {exc}")
            return EXIT_STATE
    stream = _stream(jf)
    if not 0 <= t < len(stream):
        _err(f"task index {t} outside the stream of {len(stream)} tasks")
        return EXIT_JOBFILE
    spec = jf.model_spec(stream.feature_dim, stream.num_classes)
    with StateLock(state_dir) if prior is not None else _NoLock():
        if jf.space is not None:
            hpo = jf.hpo
            work = Path(jf.paths.get("work_dir", state_dir.with_name(state_dir.name + ".hpo")))
            try:
                res = run_hpo(
                    prior,
                    stream,
                    t,
                    jf.job,
                    jf.space,
                    state_dir,
                    model_spec=spec,
                    max_trials=hpo.get("max_trials"),
                    max_time=hpo.get("max_time"),
                    backend=_backend(jf),
                    eta=hpo.get("eta", 3),
                    r_min=hpo.get("r_min", 1),
                    seed=jf.job.seed,
                    warm_start_k=hpo.get("warm_start_k", 1),
                    workdir=work,
                    archive_previous=True,
                    schedule=hpo.get("schedule", "asha"),
                )
            except HPOError as exc:
                partial = work / "partial_hpo_summary.csv"
                partial.parent.mkdir(parents=True, exist_ok=True)
                partial.write_text(exc.partial_csv)
                _err(f"{exc}; partial summary at {partial}")
                return EXIT_HPO
            state, value = res.state, res.best_trial.best(jf.job.mode)
        else:
            state, history = run_update(prior, stream, t, jf.job, state_dir, model_spec=spec, archive_previous=True)
            values = [v for _, v in history]
            value = max(values) if jf.job.mode == "max" else min(values)
    print(f"update={state.update_counter} metric={jf.job.metric} value={value!r}")
    return EXIT_OK


class _NoLock:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def cmd_evaluate(args) -> int:
    jf = load_jobfile(args.job)
    state_dir = Path(args.state_dir)
    try:
        state = load_state(state_dir)
    except (CorruptionError, StateError) as exc:
        _err(str(exc))
        return EXIT_STATE
    stream = _stream(jf)
    row, summary, _ = evaluate(state, stream)
    for j, acc in row.items():
        print(f"task={j} accuracy={acc!r} forgetting={summary['forgetting'][j]!r}")
    print(f"average_accuracy={summary['average_accuracy']!r}")
    print(f"average_forgetting={summary['average_forgetting']!r}")
    text = append_csv(state.metrics_csv, METRICS_HEADER, evaluation_rows(state, row))
    atomic_write_bytes(state_dir / "metrics.csv", text.encode())
    return EXIT_OK


def rung_table(summary_csv_text: str) -> list[tuple[int, int, int, str]]:
    """``(rung, epoch, reports, best value)`` per rung of an HPO summary."""
    rows = list(csv.DictReader(io.StringIO(summary_csv_text)))
    table = {}
    for r in rows:
        key = (int(r["rung"]), int(r["epoch"]))
        table.setdefault(key, []).append(float(r["metric_value"]))
    return [(rung, epoch, len(v), repr(max(v))) for (rung, epoch), v in sorted(table.items())]


def cmd_inspect(args) -> int:
    state_dir = Path(args.state_dir)
    try:
        state = load_state(state_dir)
    except (CorruptionError, StateError) as exc:
        where = getattr(exc, "path", None)
        print("checksums=FAILED", f"file={where}" if where else "")
        _err(str(exc))
        return EXIT_STATE
    buf = state.learner.buffer
    print(f"update_counter={state.update_counter}")
    print(f"strategy={state.learner.config.strategy}")
    print(f"tasks_seen={state.learner.tasks_seen}")
    print(f"buffer={buf.count}/{buf.capacity}" if buf else "buffer=none")
    print("checksums=ok")
    if state.hpo_summary_csv:
        for rung, epoch, n, best in rung_table(state.hpo_summary_csv):
            print(f"hpo_rung={rung} epoch={epoch} reports={n} best={best}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rengine", description="Sessionized continual-learning updates.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("make-scenario", help="prepare data and write the task stream")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_make_scenario)
    p = sub.add_parser("update", help="run one model update (with HPO if config_space is set)")
    p.add_argument("--job", required=True)
    p.add_argument("--task-index", type=int, required=True)
    p.add_argument("--state-dir", required=True)
    p.set_defaults(fn=cmd_update)
    p = sub.add_parser("evaluate", help="test accuracy and forgetting of a state")
    p.add_argument("--state-dir", required=True)
    p.add_argument("--job", required=True)
    p.set_defaults(fn=cmd_evaluate)
    p = sub.add_parser("inspect", help="summarize a state directory")
    p.add_argument("--state-dir", required=True)
    p.set_defaults(fn=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_JOBFILE if exc.code else EXIT_OK
    try:
        return args.fn(args)
    except JobFileError as exc:
        _err(f"invalid job file: {exc}")
        return EXIT_JOBFILE
    except (CorruptionError, StateError) as exc:
        _err(str(exc))
        return EXIT_STATE
    except OSError as exc:
        _err(f"I/O failure: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
