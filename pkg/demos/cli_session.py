"""
Driving the pipeline from the command line
==========================================

Each model update is a separate ``rengine update`` invocation that reads
the previous state directory and writes the next one. This script runs the
commands in-process through ``main`` so it works without the console script
on PATH; the shell equivalents are printed alongside.
"""

import tempfile
from pathlib import Path

import yaml

from rengine.cli import main

work = Path(tempfile.mkdtemp())
job = {
    "scenario": {
        "source": {"kind": "synthetic_blobs", "train_per_class": 100, "test_per_class": 50, "seed": 0},
        "kind": {"kind": "class_incremental", "num_tasks": 5},
        "seed": 0,
    },
    "model": {"hidden_dims": [64], "seed": 0},
    "learner": {"strategy": "der_pp", "buffer_capacity": 200},
    "optimizer": {"momentum": 0.9},
    "training": {"max_epochs": 3},
    "config_space": {"learning_rate": {"choice": [0.02, 0.05, 0.1]}},
    "hpo": {"max_trials": 4},
    "seed": 0,
    "paths": {"data_dir": str(work / "data")},
}
(work / "job.yaml").write_text(yaml.safe_dump(job))


def run(*argv):
    print("$ rengine", " ".join(map(str, argv)))
    code = main([str(a) for a in argv])
    print(f"(exit {code})\n")


run("make-scenario", "--spec", work / "job.yaml", "--out", work / "scenario")
for t in range(3):
    run("update", "--job", work / "job.yaml", "--task-index", t, "--state-dir", work / "state")
run("evaluate", "--state-dir", work / "state", "--job", work / "job.yaml")
run("inspect", "--state-dir", work / "state")
