"""
Reservoir sampling on disk
==========================

The rehearsal buffer keeps a uniform sample of everything it was offered.
Decisions are a hash of (seed, position in the stream), so the same
stream always produces the same buffer, even across a save and reload.
"""

import tempfile
from pathlib import Path

import numpy as np

from rengine.buffer import buffer_create, buffer_load, reservoir_draws, reservoir_slots

root = Path(tempfile.mkdtemp())
buf = buffer_create(10, root / "buffer", feature_dim=2, num_classes=4, seed=3)

rng = np.random.default_rng(0)
for start in range(0, 200, 25):
    x = rng.normal(size=(25, 2))
    buf.update(x, rng.integers(0, 4, size=25), task_id=start // 50)
buf.save()
print(f"capacity={buf.capacity} count={buf.count} seen={buf.seen}")

###############################################################################
# Only the manifest is read on load; records come off disk on demand.

again = buffer_load(root / "buffer")
print("stream positions kept:", sorted(r.seen_index for r in again.all_records()))
batch = again.sample(4, np.random.default_rng(1))
print("sampled labels:", [r.label for r in batch], "bytes read:", again.bytes_read)

###############################################################################
# The same decision rule, vectorised over many seeds: every element of a
# stream of 100 should be kept with probability 10/100.

seeds = np.arange(5000, dtype=np.uint64)[:, None]
seen = np.arange(1, 101, dtype=np.int64)[None, :]
slots = reservoir_slots(seen, 10, reservoir_draws(seeds, seen.astype(np.uint64)))
resident = np.zeros((5000, 10), dtype=int)
rows = np.arange(5000)
for t in range(100):
    hit = slots[:, t] >= 0
    resident[rows[hit], slots[hit, t]] = t
freq = np.bincount(resident.ravel(), minlength=100) / 5000
print(f"inclusion frequency: min {freq.min():.3f} max {freq.max():.3f} (expected 0.100)")
