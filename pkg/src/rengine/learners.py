"""Continual-learning strategies as loss compositions plus buffer hooks.

Every strategy optimises cross-entropy on the new batch and adds its own
terms on top:

=========  ==========================================================
fine_tune  nothing
er         ``er_weight * CE(memory sample)``
der        ``alpha * MSE(f(x_mem), stored logits)``
der_pp     der plus ``beta * CE(second, independent memory sample)``
ewc        ``lambda / 2 * sum_i F_i (theta_i - anchor_i)^2``
joint      nothing; the updater feeds batches from every task so far
=========  ==========================================================

Terms whose weight is zero are skipped outright, so the weighted variants
reduce exactly to ``fine_tune``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import nn
from .buffer import RehearsalBuffer, records_to_batch

STRATEGIES = ("fine_tune", "er", "der", "der_pp", "ewc", "joint")
BUFFER_STRATEGIES = ("er", "der", "der_pp")


@dataclass
class LearnerConfig:
    strategy: str = "fine_tune"
    memory_batch_size: int | None = None
    er_weight: float = 1.0
    alpha: float = 0.1
    beta: float = 0.5
    ewc_lambda: float = 1.0
    buffer_capacity: int = 500
    fisher_samples: int = 1024

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        for name in ("er_weight", "alpha", "beta", "ewc_lambda"):
            v = float(getattr(self, name))
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
            setattr(self, name, v)
        if self.memory_batch_size is not None and self.memory_batch_size < 0:
            raise ValueError("memory_batch_size must be >= 0")
        if self.buffer_capacity < 1:
            raise ValueError("buffer_capacity must be >= 1")

    @property
    def uses_buffer(self) -> bool:
        return self.strategy in BUFFER_STRATEGIES

    @property
    def stores_logits(self) -> bool:
        return self.strategy in ("der", "der_pp")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["lambda"] = d.pop("ewc_lambda")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LearnerConfig":
        d = dict(d)
        if "lambda" in d:
            d["ewc_lambda"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown learner keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossBreakdown:
    total: float
    terms: dict[str, float] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)


class Learner:
    """Strategy state carried from one update to the next."""

    def __init__(
        self,
        config: LearnerConfig,
        buffer: RehearsalBuffer | None = None,
        ewc_anchor: np.ndarray | None = None,
        ewc_fisher: np.ndarray | None = None,
        task_ids: list[int] | None = None,
    ):
        self.config = config
        self.buffer = buffer
        self.ewc_anchor = ewc_anchor
        self.ewc_fisher = ewc_fisher
        self.task_ids = list(task_ids or [])
        if config.uses_buffer and buffer is not None and buffer.stores_logits != config.stores_logits:
            kind = "with" if buffer.stores_logits else "without"
            raise ValueError(f"strategy {config.strategy} cannot use a buffer {kind} logits")

    @property
    def tasks_seen(self) -> int:
        return len(self.task_ids)

    # -- loss ------------------------------------------------------------

    def ewc_penalty(self, params: np.ndarray) -> tuple[float, np.ndarray]:
        """``(lambda/2) sum F (theta - anchor)^2`` and its gradient."""
        if self.ewc_anchor is None:
            return 0.0, np.zeros_like(params)
        diff = params - self.ewc_anchor
        lam = self.config.ewc_lambda
        return 0.5 * lam * float(np.dot(self.ewc_fisher, diff * diff)), lam * self.ewc_fisher * diff

    def _memory_batch(self, n: int, rng: np.random.Generator):
        k = self.config.memory_batch_size
        k = n if k is None else k
        if k == 0 or self.buffer is None or self.buffer.count == 0:
            return None
        return records_to_batch(self.buffer.sample(k, rng))

    def training_step(
        self, spec: nn.ModelSpec, params: np.ndarray, new_batch: nn.Batch, rng: np.random.Generator
    ) -> tuple[LossBreakdown, np.ndarray]:
        cfg = self.config
        new_ce, grad = nn.loss_and_grad(spec, params, new_batch, nn.LossMix(cross_entropy=1.0))
        out = LossBreakdown(new_ce, {"new_ce": new_ce}, {"new_ce": 1.0})

        def add(name, weight, value, g):
            nonlocal grad
            out.terms[name] = value
            out.weights[name] = weight
            out.total += weight * value
            grad = grad + weight * g

        s = cfg.strategy
        if s == "er" and cfg.er_weight > 0:
            mem = self._memory_batch(len(new_batch), rng)
            if mem is not None:
                add("mem_ce", cfg.er_weight, *nn.loss_and_grad(spec, params, mem))
        elif s in ("der", "der_pp"):
            if self.buffer is not None and not self.buffer.stores_logits:
                raise ValueError("dark experience replay needs a buffer that stores logits")
            if cfg.alpha > 0:
                mem = self._memory_batch(len(new_batch), rng)
                if mem is not None:
                    mix = nn.LossMix(cross_entropy=0.0, mse_logits=1.0)
                    add("mem_mse", cfg.alpha, *nn.loss_and_grad(spec, params, mem, mix))
            if s == "der_pp" and cfg.beta > 0:
                mem = self._memory_batch(len(new_batch), rng)
                if mem is not None:
                    add("mem_ce", cfg.beta, *nn.loss_and_grad(spec, params, mem))
        elif s == "ewc" and cfg.ewc_lambda > 0 and self.ewc_anchor is not None:
            value, g = self.ewc_penalty(params)
            out.terms["ewc_penalty"] = value
            out.weights["ewc_penalty"] = 1.0
            out.total += value
            grad = grad + g
        return out, grad

    # -- hooks -----------------------------------------------------------

    def on_batch_end(self, spec: nn.ModelSpec, params: np.ndarray, new_batch: nn.Batch, task_id: int) -> None:
        if not self.config.uses_buffer:
            return
        if self.buffer is None:
            raise RuntimeError(f"strategy {self.config.strategy} has no buffer attached")
        logits = nn.forward(spec, params, new_batch) if self.buffer.stores_logits else None
        self.buffer.update(new_batch.features, new_batch.labels, task_id, logits)

    def on_task_end(
        self,
        spec: nn.ModelSpec,
        params: np.ndarray,
        x: np.ndarray,
        y: np.ndarray,
        task_id: int,
        seed=0,
    ) -> None:
        if self.config.strategy == "ewc":
            if len(y) == 0:
                raise ValueError("EWC needs task data to estimate the Fisher diagonal")
            fisher = empirical_fisher(spec, params, x, y, self.config.fisher_samples, seed)
            self.ewc_fisher = fisher if self.ewc_fisher is None else self.ewc_fisher + fisher
            self.ewc_anchor = np.array(params, dtype=np.float64, copy=True)
        self.task_ids.append(int(task_id))

    # -- persistence -----------------------------------------------------

    def save(self, directory) -> list[str]:
        """Write ``learner.json`` and EWC vectors; returns the files written."""
        directory = Path(directory)
        doc = {
            "config": self.config.to_dict(),
            "tasks_seen": self.tasks_seen,
            "task_ids": self.task_ids,
            "has_buffer": self.buffer is not None,
        }
        (directory / "learner.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
        written = ["learner.json"]
        if self.ewc_anchor is not None:
            nn.save_params(directory / "ewc_anchor.bin", self.ewc_anchor)
            nn.save_params(directory / "ewc_fisher.bin", self.ewc_fisher)
            written += ["ewc_anchor.bin", "ewc_fisher.bin"]
        return written

    @classmethod
    def load(cls, directory, num_params: int | None = None) -> "Learner":
        directory = Path(directory)
        doc = json.loads((directory / "learner.json").read_text())
        config = LearnerConfig.from_dict(doc["config"])
        anchor = fisher = None
        if (directory / "ewc_anchor.bin").exists():
            anchor = nn.decode_params((directory / "ewc_anchor.bin").read_bytes(), directory / "ewc_anchor.bin", num_params)
            fisher = nn.decode_params((directory / "ewc_fisher.bin").read_bytes(), directory / "ewc_fisher.bin", num_params)
        buffer = RehearsalBuffer.load(directory / "buffer") if doc.get("has_buffer") else None
        learner = cls.__new__(cls)
        learner.config = config
        learner.buffer = buffer
        learner.ewc_anchor = anchor
        learner.ewc_fisher = fisher
        learner.task_ids = list(doc["task_ids"])
        return learner


def empirical_fisher(
    spec: nn.ModelSpec, params: np.ndarray, x: np.ndarray, y: np.ndarray, max_samples: int = 1024, seed=0
) -> np.ndarray:
    """Mean squared per-example cross-entropy gradient over up to ``max_samples`` examples."""
    n = len(y)
    idx = np.random.default_rng(seed).permutation(n)[: min(max_samples, n)]
    fisher = np.zeros(spec.num_params)
    for i in idx:
        _, g = nn.loss_and_grad(spec, params, nn.Batch(x[i : i + 1], y[i : i + 1]))
        fisher += g * g
    return fisher / len(idx)
