"""Dense MLP core: forward/backward, composable losses, SGD and checkpoints.

Parameters live in one flat float64 vector. For each consecutive pair of
layer widths ``(d_in, d_out)`` the vector holds the weight matrix of shape
``(d_in, d_out)`` in row-major order followed by the bias of length
``d_out``. A layer computes ``a @ W + b``; hidden layers apply the
activation, the last layer emits raw logits.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import CorruptionError, fnv1a64

ACTIVATIONS = ("relu", "tanh")
CKPT_MAGIC = b"RNCKPT1\n"


class ShapeError(ValueError):
    pass


@dataclass
class ModelSpec:
    layer_dims: list[int]
    activation: str = "relu"
    seed: int = 0
    registered_hyperparameters: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ValueError(f"layer_dims must have >= 2 positive entries, got {self.layer_dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        self.seed = int(self.seed)

    @property
    def num_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.layer_dims[:-1], self.layer_dims[1:]))

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    def to_dict(self) -> dict:
        return {
            "layer_dims": list(self.layer_dims),
            "activation": self.activation,
            "seed": self.seed,
            "registered_hyperparameters": dict(self.registered_hyperparameters),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            layer_dims=d["layer_dims"],
            activation=d["activation"],
            seed=d["seed"],
            registered_hyperparameters=dict(d.get("registered_hyperparameters", {})),
        )


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray
    target_logits: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.shape[0] < 1:
            raise ValueError("a batch needs at least one example")
        if self.labels.shape[0] != self.features.shape[0]:
            raise ShapeError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )
        if self.target_logits is not None:
            self.target_logits = np.atleast_2d(np.asarray(self.target_logits, dtype=np.float64))
            if self.target_logits.shape[0] != self.features.shape[0]:
                raise ShapeError("target_logits rows do not match the batch size")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class LossMix:
    """Weighted sum of cross-entropy on labels and MSE against target logits."""

    cross_entropy: float = 1.0
    mse_logits: float = 0.0

    def __post_init__(self):
        for name in ("cross_entropy", "mse_logits"):
            w = getattr(self, name)
            if not (math.isfinite(w) and w >= 0):
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {w}")


@dataclass
class OptimizerState:
    momentum_buffers: np.ndarray
    learning_rate: float = 0.01
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        self.momentum_buffers = np.asarray(self.momentum_buffers, dtype=np.float64)
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not self.weight_decay >= 0:
            raise ValueError("weight_decay must be >= 0")

    @classmethod
    def zeros(cls, n: int, **hyper) -> "OptimizerState":
        return cls(np.zeros(n), **hyper)

    def hyperparameters(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
        }

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.momentum_buffers.copy(), **self.hyperparameters())


def unflatten(spec: ModelSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views ``(W, b)`` per layer into ``params`` (no copies)."""
    params = np.asarray(params)
    if params.shape != (spec.num_params,):
        raise ShapeError(
            f"parameter vector has length {params.size}, model expects {spec.num_params}"
        )
    layers = []
    pos = 0
    for d_in, d_out in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
        w = params[pos : pos + d_in * d_out].reshape(d_in, d_out)
        pos += d_in * d_out
        b = params[pos : pos + d_out]
        pos += d_out
        layers.append((w, b))
    return layers


def init_params(spec: ModelSpec) -> np.ndarray:
    """Glorot-uniform weights, zero biases.

    Draws come from a Philox generator keyed by ``spec.seed`` and are
    consumed layer by layer in canonical order, so the same spec always
    yields the same vector.
    """
    rng = np.random.Generator(np.random.Philox(key=spec.seed))
    params = np.zeros(spec.num_params)
    for w, _ in unflatten(spec, params):
        d_in, d_out = w.shape
        limit = math.sqrt(6.0 / (d_in + d_out))
        w[...] = rng.uniform(-limit, limit, size=(d_in, d_out))
    return params


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _activation_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    return (z > 0).astype(np.float64) if kind == "relu" else 1.0 - a * a


def _check_input(spec: ModelSpec, features: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[1] != spec.input_dim:
        raise ShapeError(
            f"batch feature dim {x.shape[1]} does not match model input dim {spec.input_dim}"
        )
    return x


def _forward_cache(spec, params, x):
    layers = unflatten(spec, params)
    acts = [x]
    pre = []
    for i, (w, b) in enumerate(layers):
        z = acts[-1] @ w + b
        if not np.all(np.isfinite(z)):
            raise FloatingPointError(f"non-finite values at layer {i + 1}")
        pre.append(z)
        acts.append(z if i == len(layers) - 1 else _activate(z, spec.activation))
    return layers, acts, pre


def forward(spec: ModelSpec, params: np.ndarray, batch) -> np.ndarray:
    """Logits for ``batch`` (a :class:`Batch` or a feature matrix)."""
    features = batch.features if isinstance(batch, Batch) else batch
    x = _check_input(spec, features)
    return _forward_cache(spec, params, x)[1][-1]


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_grad(
    spec: ModelSpec, params: np.ndarray, batch: Batch, loss_mix: LossMix = LossMix()
) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient w.r.t. the flat parameters.

    Cross-entropy averages over examples; the logit MSE averages over all
    ``n * K`` entries.
    """
    x = _check_input(spec, batch.features)
    n = x.shape[0]
    k = spec.num_classes
    if np.any(batch.labels < 0) or np.any(batch.labels >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    if loss_mix.mse_logits > 0:
        if batch.target_logits is None:
            raise ValueError("mse_logits term requested but the batch has no target_logits")
        if batch.target_logits.shape[1] != k:
            raise ShapeError(
                f"target_logits has {batch.target_logits.shape[1]} columns, model has {k} classes"
            )

    layers, acts, pre = _forward_cache(spec, params, x)
    logits = acts[-1]
    loss = 0.0
    dz = np.zeros_like(logits)
    if loss_mix.cross_entropy > 0:
        logp = log_softmax(logits)
        loss += loss_mix.cross_entropy * float(-logp[np.arange(n), batch.labels].mean())
        p = np.exp(logp)
        p[np.arange(n), batch.labels] -= 1.0
        dz += (loss_mix.cross_entropy / n) * p
    if loss_mix.mse_logits > 0:
        diff = logits - batch.target_logits
        loss += loss_mix.mse_logits * float(np.mean(diff * diff))
        dz += (2.0 * loss_mix.mse_logits / (n * k)) * diff

    grad = np.zeros(spec.num_params)
    grad_layers = unflatten(spec, grad)
    for i in range(len(layers) - 1, -1, -1):
        gw, gb = grad_layers[i]
        gw[...] = acts[i].T @ dz
        gb[...] = dz.sum(axis=0)
        if i > 0:
            da = dz @ layers[i][0].T
            dz = da * _activation_grad(pre[i - 1], acts[i], spec.activation)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    return loss, grad


def sgd_step(
    params: np.ndarray, grad: np.ndarray, opt_state: OptimizerState
) -> tuple[np.ndarray, OptimizerState]:
    """SGD with heavy-ball momentum and L2 weight decay folded into the gradient."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or params.shape != opt_state.momentum_buffers.shape:
        raise ShapeError(
            f"length mismatch: params {params.size}, grad {grad.size}, "
            f"momentum {opt_state.momentum_buffers.size}"
        )
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient passed to sgd_step")
    v = opt_state.momentum * opt_state.momentum_buffers + (grad + opt_state.weight_decay * params)
    new_params = params - opt_state.learning_rate * v
    return new_params, OptimizerState(v, **opt_state.hyperparameters())


def encode_params(values: np.ndarray) -> bytes:
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ValueError("refusing to save an empty parameter vector")
    payload = values.astype("<f8").tobytes()
    return CKPT_MAGIC + struct.pack("<Q", values.size) + payload + struct.pack("<Q", fnv1a64(payload))


def decode_params(data: bytes, path=None, expected_length: int | None = None) -> np.ndarray:
    header = len(CKPT_MAGIC) + 8
    if len(data) < header or data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CorruptionError("not a checkpoint file (bad magic)", path)
    (length,) = struct.unpack("<Q", data[len(CKPT_MAGIC) : header])
    if len(data) != header + 8 * length + 8:
        raise CorruptionError(
            f"checkpoint truncated or padded: header says {length} values, "
            f"file has {len(data)} bytes",
            path,
        )
    payload = data[header : header + 8 * length]
    (stored,) = struct.unpack("<Q", data[header + 8 * length :])
    if fnv1a64(payload) != stored:
        raise CorruptionError("checkpoint checksum mismatch", path)
    if expected_length is not None and length != expected_length:
        raise ShapeError(f"checkpoint holds {length} values, model expects {expected_length}")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64)


def save_params(path: str | os.PathLike, values: np.ndarray) -> None:
    data = encode_params(values)
    Path(path).write_bytes(data)


def load_params(path: str | os.PathLike, spec: ModelSpec | None = None) -> np.ndarray:
    data = Path(path).read_bytes()
    return decode_params(data, path, None if spec is None else spec.num_params)
