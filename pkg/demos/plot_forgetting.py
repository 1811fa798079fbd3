"""
Forgetting on a class-incremental blob stream
==============================================

Ten Gaussian blobs are split into five two-class tasks. A small MLP is
updated once per task with plain fine-tuning, with experience replay
(buffer of 500), and with joint retraining on everything seen so far.
"""

import tempfile
from pathlib import Path

import numpy as np

from rengine.data import BlobSource, ClassIncremental, ScenarioSpec, prepare_data, setup
from rengine.learners import LearnerConfig
from rengine.nn import ModelSpec
from rengine.updater import AccuracyMatrix, UpdateJobConfig, evaluate, run_update

root = Path(tempfile.mkdtemp())
scenario = ScenarioSpec(BlobSource(seed=0), ClassIncremental(5), seed=0)
prepare_data(scenario, root / "data")
stream = setup(scenario, root / "data")
print(f"{len(stream)} tasks, {stream.num_classes} classes")

###############################################################################
# One model update per task. ``evaluate`` keeps the accuracy matrix so the
# forgetting of every old task can be read off at the end.

def run(strategy):
    job = UpdateJobConfig(
        LearnerConfig(strategy, buffer_capacity=500),
        learning_rate=0.05, momentum=0.9, max_epochs=5, seed=0,
        validation_scope="cumulative",
    )
    state, matrix = None, AccuracyMatrix()
    for t in range(len(stream)):
        state, _ = run_update(state, stream, t, job, root / strategy,
                              model_spec=ModelSpec([2, 64, 10], seed=0))
        row, summary, matrix = evaluate(state, stream, matrix)
    return matrix, summary

results = {s: run(s) for s in ("fine_tune", "er", "joint")}

###############################################################################
# Rows are updates, columns tasks. Fine-tuning only remembers the last task.

for name, (matrix, summary) in results.items():
    print(f"\n{name}: average accuracy {summary['average_accuracy']:.3f}, "
          f"average forgetting {summary['average_forgetting']:.3f}")
    for update, row in sorted(matrix.rows.items()):
        cells = " ".join(f"{row.get(j, np.nan):5.2f}" for j in range(len(stream)))
        print(f"  after update {update}: {cells}")
