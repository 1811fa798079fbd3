"""Surrogate trainables for scheduler and runner tests.

They follow the runner's segment contract: report once per epoch listed in
``job.rungs`` and stop early when the coordinator asks.
"""

import math
import os
import time


def curve(job, ctx):
    """Metric read from ``payload["curves"][config["curve"]][epoch]``."""
    table = job.payload["curves"][job.config["curve"]]
    for epoch in job.rungs:
        ctx.report(epoch, table[str(epoch)])
        if ctx.should_stop():
            return


def planted(job, ctx):
    """Peaked at ``payload["lr_star"]`` in log space; improves with epochs."""
    lr_star = job.payload["lr_star"]
    for epoch in job.rungs:
        gap = (math.log(job.config["learning_rate"]) - math.log(lr_star)) ** 2
        ctx.report(epoch, -gap - 1.0 / epoch)


def slow(job, ctx):
    """Sleeps before each report; fails when the config asks it to."""
    for epoch in job.rungs:
        time.sleep(job.payload.get("sleep", 0.05))
        if job.config.get("fail_at") == epoch:
            raise RuntimeError(f"planted failure at epoch {epoch}")
        if job.config.get("hang_at") == epoch:
            time.sleep(60)
        if job.config.get("die_at") == epoch:
            os._exit(9)
        ctx.report(epoch, float(job.config.get("value", epoch)))
        if ctx.should_stop():
            return


def touch_buffer(job, ctx):
    """Mutate the job's private buffer copy, then report."""
    path = os.path.join(job.working_dir, "buffer", "scratch.bin")
    with open(path, "ab") as fh:
        fh.write(b"x" * 128)
    for epoch in job.rungs:
        ctx.report(epoch, 0.5)
