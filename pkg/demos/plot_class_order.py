"""
Class order and per-update tuning
=================================

The same replay configuration is trained on two orderings of the same ten
classes. Then the weaker ordering is rerun with a small search at every
update, warm-started from the previous update's best configuration.
"""

import tempfile
from pathlib import Path

from rengine.data import BlobSource, ClassIncremental, ScenarioSpec, apply_class_order, prepare_data, setup
from rengine.hpo import ConfigSpace, Choice, run_hpo
from rengine.learners import LearnerConfig
from rengine.nn import ModelSpec
from rengine.updater import AccuracyMatrix, UpdateJobConfig, evaluate, run_update

root = Path(tempfile.mkdtemp())
orders = {"identity": list(range(10)), "interleaved": [0, 5, 1, 6, 2, 7, 3, 8, 4, 9]}
job = UpdateJobConfig(LearnerConfig("er", buffer_capacity=500), learning_rate=0.05, momentum=0.9,
                      max_epochs=5, seed=3, validation_scope="cumulative", metric="val_loss")
model = ModelSpec([2, 64, 10], seed=3)


def stream_for(order):
    spec = apply_class_order(ScenarioSpec(BlobSource(seed=3), ClassIncremental(5), seed=3), order)
    d = root / ("data_" + "".join(map(str, order)))
    prepare_data(spec, d)
    return setup(spec, d)


fixed = {}
for name, order in orders.items():
    stream, state, matrix = stream_for(order), None, AccuracyMatrix()
    for t in range(5):
        state, _ = run_update(state, stream, t, job, root / name, model_spec=model)
        row, summary, matrix = evaluate(state, stream, matrix)
    fixed[name] = summary
    print(f"{name:12s} per-task {[round(row[j], 2) for j in sorted(row)]} "
          f"average {summary['average_accuracy']:.3f}")

###############################################################################
# Tune learning rate and replay weight at every update on the harder order.

worst = min(fixed, key=lambda k: fixed[k]["average_accuracy"])
space = ConfigSpace({"learning_rate": Choice((0.02, 0.05, 0.1)), "er_weight": Choice((1.0, 2.0))})
stream, state, matrix = stream_for(orders[worst]), None, AccuracyMatrix()
for t in range(5):
    res = run_hpo(root / "tuned" if state else None, stream, t, job, space, root / "tuned",
                  model_spec=model, max_trials=9, seed=3, warm_start_k=1)
    state = res.state
    row, summary, matrix = evaluate(state, stream, matrix)
    print(f"update {t + 1}: best {res.best_trial.config}")
print(f"{worst}: fixed {fixed[worst]['average_accuracy']:.3f} -> tuned {summary['average_accuracy']:.3f}")
