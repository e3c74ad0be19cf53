"""Small dense-network engine: init, forward, softmax cross-entropy, SGD.

Parameters are plain numpy arrays (float32 by default). All functions are
pure: they never mutate their inputs, so a training job that owns its
``Params`` can run alongside other jobs without coordination.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, FormatError, LabelError, RangeError

ACTIVATIONS = ("relu", "tanh")
DTYPE = np.float32

CLBW_MAGIC = b"CLBW"
CLBW_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_layers: tuple[int, ...] = ()
    num_classes: int = 2
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1", field="input_dim")
        if any(h < 1 for h in self.hidden_layers):
            raise ConfigError("hidden layer sizes must be >= 1", field="hidden_layers")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2", field="num_classes")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}", field="activation")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer", field="seed")

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_layers, self.num_classes]

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_layers": list(self.hidden_layers),
            "num_classes": self.num_classes,
            "activation": self.activation,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_layers=tuple(d.get("hidden_layers", ())),
            num_classes=int(d["num_classes"]),
            activation=d.get("activation", "relu"),
            seed=int(d.get("seed", 0)),
        )


@dataclass
class Params:
    """Per-layer weights (fan_in x fan_out) and biases (fan_out,)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __iter__(self) -> Iterator[np.ndarray]:
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def shapes(self) -> list[tuple[int, ...]]:
        return [a.shape for a in self]

    def copy(self) -> "Params":
        return Params([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def astype(self, dtype) -> "Params":
        return Params([w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases])

    def bitwise_equal(self, other: "Params") -> bool:
        if self.shapes() != other.shapes():
            return False
        return all(a.dtype == b.dtype and a.tobytes() == b.tobytes() for a, b in zip(self, other))

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self)


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DimensionError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise DimensionError(
                f"{self.features.shape[0]} feature rows but labels have shape {self.labels.shape}"
            )

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def take(self, idx) -> "Batch":
        return Batch(self.features[idx], self.labels[idx])

    @staticmethod
    def concat(batches: Sequence["Batch"], feature_dim: int | None = None) -> "Batch":
        batches = [b for b in batches if len(b)]
        if not batches:
            return Batch(np.zeros((0, feature_dim or 0), dtype=DTYPE))
        return Batch(
            np.concatenate([b.features for b in batches]),
            np.concatenate([b.labels for b in batches]),
        )

    def equals(self, other: "Batch") -> bool:
        return (
            self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
            and np.array_equal(self.labels, other.labels)
        )


def init_params(spec: ModelSpec) -> Params:
    """Glorot-uniform weights from a PRNG seeded by ``spec.seed``; zero biases."""
    rng = np.random.default_rng(spec.seed)
    dims = spec.layer_dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(DTYPE))
        biases.append(np.zeros(fan_out, dtype=DTYPE))
    return Params(weights, biases)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0)
    return np.tanh(z)


def _check_input(params: Params, features: np.ndarray) -> None:
    if features.ndim != 2 or features.shape[1] != params.weights[0].shape[0]:
        raise DimensionError(
            f"expected features of shape (N, {params.weights[0].shape[0]}), got {features.shape}"
        )


def _forward_cached(params: Params, x: np.ndarray, activation: str):
    _check_input(params, x)
    x = x.astype(params.weights[0].dtype, copy=False)
    inputs, pre = [], []
    h = x
    last = params.num_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        h = z if i == last else _activate(z, activation)
    return h, inputs, pre


def forward(params: Params, batch: Batch | np.ndarray, activation: str = "relu") -> np.ndarray:
    """Logits of shape (N, num_classes)."""
    x = batch.features if isinstance(batch, Batch) else np.asarray(batch)
    logits, _, _ = _forward_cached(params, x, activation)
    return logits


def loss_and_grad(params: Params, batch: Batch, activation: str = "relu") -> tuple[float, Params]:
    """Mean softmax cross-entropy over the batch and its gradient w.r.t. ``params``."""
    if len(batch) == 0:
        raise DimensionError("empty batch")
    num_classes = params.weights[-1].shape[1]
    labels = batch.labels
    if labels.min() < 0 or labels.max() >= num_classes:
        bad = int(labels[(labels < 0) | (labels >= num_classes)][0])
        raise LabelError(f"label {bad} outside [0, {num_classes})")

    logits, inputs, pre = _forward_cached(params, batch.features, activation)
    n = len(batch)
    rows = np.arange(n)

    # loss accumulated in float64
    z = logits.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsumexp - z[rows, labels]))

    probs = np.exp(z - logsumexp[:, None])
    probs[rows, labels] -= 1.0
    delta = (probs / n).astype(logits.dtype)

    gw: list[np.ndarray] = [None] * params.num_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * params.num_layers  # type: ignore[list-item]
    for i in range(params.num_layers - 1, -1, -1):
        gw[i] = inputs[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ params.weights[i].T
            if activation == "relu":
                delta = delta * (pre[i - 1] > 0)
            else:
                delta = delta * (1 - np.tanh(pre[i - 1]) ** 2)
    return loss, Params(gw, gb)


def sgd_step(params: Params, grads: Params, lr: float) -> Params:
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    if params.shapes() != grads.shapes():
        raise DimensionError("gradient shapes do not match parameters")
    return Params(
        [w - np.asarray(lr, w.dtype) * g for w, g in zip(params.weights, grads.weights)],
        [b - np.asarray(lr, b.dtype) * g for b, g in zip(params.biases, grads.biases)],
    )


def topk_from_logits(logits: np.ndarray, k: int) -> np.ndarray:
    num_classes = logits.shape[1]
    if not 1 <= k <= num_classes:
        raise RangeError(f"k={k} outside [1, {num_classes}]")
    # stable sort on negated logits: equal logits keep ascending class order
    return np.argsort(-logits, axis=1, kind="stable")[:, :k]


def predict_topk(params: Params, batch: Batch | np.ndarray, k: int, activation: str = "relu") -> np.ndarray:
    """Class indices of the ``k`` largest logits per sample, best first."""
    num_classes = params.weights[-1].shape[1]
    if not 1 <= k <= num_classes:
        raise RangeError(f"k={k} outside [1, {num_classes}]")
    return topk_from_logits(forward(params, batch, activation), k)


def serialize_params(params: Params) -> bytes:
    """Encode as a CLBW weights blob."""
    out = [CLBW_MAGIC, struct.pack("<II", CLBW_VERSION, params.num_layers)]
    for w, b in zip(params.weights, params.biases):
        rows, cols = w.shape
        if b.shape != (cols,):
            raise DimensionError("bias length must equal weight columns")
        out.append(struct.pack("<II", rows, cols))
        out.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        out.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return b"".join(out)


def deserialize_params(blob: bytes) -> Params:
    if len(blob) < 12 or blob[:4] != CLBW_MAGIC:
        raise FormatError("not a CLBW blob")
    version, n_layers = struct.unpack_from("<II", blob, 4)
    if version != CLBW_VERSION:
        raise FormatError(f"unsupported CLBW version {version}")
    offset = 12
    weights, biases = [], []
    try:
        for _ in range(n_layers):
            rows, cols = struct.unpack_from("<II", blob, offset)
            offset += 8
            w = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=offset)
            offset += 4 * rows * cols
            b = np.frombuffer(blob, dtype="<f4", count=cols, offset=offset)
            offset += 4 * cols
            weights.append(w.reshape(rows, cols).astype(DTYPE))
            biases.append(b.astype(DTYPE))
    except (struct.error, ValueError) as exc:
        raise FormatError(f"truncated CLBW blob: {exc}") from exc
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes after last layer")
    for prev, nxt in zip(weights[:-1], weights[1:]):
        if prev.shape[1] != nxt.shape[0]:
            raise FormatError("inconsistent layer dimensions")
    return Params(weights, biases)
