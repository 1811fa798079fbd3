"""
Asynchronous successive halving on a toy objective
==================================================

Trials report a metric at rungs 1, 3 and 9 epochs. Only the top third at
each rung is promoted. The objective here is cheap and peaks at a planted
learning rate, so the search should find it.
"""

import csv
import io
import math
import tempfile
from pathlib import Path

from rengine.hpo import ConfigSpace, Choice, asha_search


def planted(job, ctx):
    lr = job.config["learning_rate"]
    for epoch in job.rungs:
        ctx.report(epoch, -(math.log10(lr) - math.log10(0.03)) ** 2 - 1.0 / epoch)


###############################################################################
# Trainables are referenced as ``module:function``. The default local
# backend runs trials in threads, so this script's own ``__main__`` works.

space = ConfigSpace({"learning_rate": Choice((1e-4, 1e-3, 1e-2, 3e-2, 1e-1, 1.0))})
result = asha_search(space, "__main__:planted", Path(tempfile.mkdtemp()),
                     r_max=9, eta=3, max_trials=18, seed=0)

print("best config:", result.best_trial.config, "value", round(result.best_trial.best("max"), 4))

###############################################################################
# The summary CSV has one row per report.

for row in list(csv.DictReader(io.StringIO(result.summary_csv)))[:8]:
    print(row["trial_id"], row["learning_rate"], row["epoch"], row["metric_value"], row["status"])
