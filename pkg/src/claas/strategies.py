"""Stateful continual-learning strategies: naive fine-tuning, cumulative retraining, replay."""

from __future__ import annotations

import io
import json
import time
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Iterator

import numpy as np

from . import nn
from .errors import ClaasError, ConfigError, EmptyExperience
from .nn import Batch, ModelSpec, Params
from .scenario import Experience

STRATEGIES = ("naive", "cumulative", "replay")
SAMPLINGS = ("reservoir", "class_balanced")
HOOK_KINDS = ("before_experience", "after_epoch", "after_experience")


@dataclass(frozen=True)
class StrategyConfig:
    name: str
    epochs: int = 1
    batch_size: int = 32
    lr: float = 0.05
    memory_size: int | None = None
    replay_ratio: float | None = None
    sampling: str | None = None

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.name!r}", code="UnknownStrategy", field="name")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1", field="epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", field="batch_size")
        if not self.lr > 0:
            raise ConfigError("lr must be positive", field="lr")
        if self.memory_size is not None and self.memory_size < 1:
            raise ConfigError("memory_size must be >= 1", field="memory_size")
        if self.replay_ratio is not None and not 0 < self.replay_ratio <= 1:
            raise ConfigError("replay_ratio must lie in (0, 1]", field="replay_ratio")
        if self.sampling is not None and self.sampling not in SAMPLINGS:
            raise ConfigError(f"unknown sampling {self.sampling!r}", field="sampling")

    @property
    def effective_ratio(self) -> float:
        return 0.5 if self.replay_ratio is None else self.replay_ratio

    @property
    def effective_sampling(self) -> str:
        return self.sampling or "reservoir"

    def validate(self, strict: bool = True) -> None:
        if self.name == "replay":
            if self.memory_size is None:
                raise ConfigError("replay requires memory_size", code="MissingField", field="memory_size")
        elif strict:
            for fname in ("memory_size", "replay_ratio", "sampling"):
                if getattr(self, fname) is not None:
                    raise ConfigError(
                        f"{fname} does not apply to strategy {self.name!r}",
                        code="IrrelevantField",
                        field=fname,
                    )

    def to_dict(self) -> dict:
        d = {"name": self.name, "epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr}
        for fname in ("memory_size", "replay_ratio", "sampling"):
            if getattr(self, fname) is not None:
                d[fname] = getattr(self, fname)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StrategyConfig":
        return cls(**d)


@dataclass
class ReplayBuffer:
    """Raw (features, label) pairs kept for rehearsal, oldest first."""

    features: np.ndarray
    labels: np.ndarray
    seen: int = 0

    @classmethod
    def empty(cls, feature_dim: int) -> "ReplayBuffer":
        return cls(np.zeros((0, feature_dim), dtype=nn.DTYPE), np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return self.labels.shape[0]

    def as_batch(self) -> Batch:
        return Batch(self.features, self.labels)


@dataclass(frozen=True)
class HookEvent:
    kind: str
    experience: int
    epoch: int | None = None
    loss: float | None = None


Hook = Callable[[HookEvent], None]


@dataclass(frozen=True)
class TrainStats:
    seconds: float
    patterns_trained_on: int
    final_loss: float


@dataclass
class StrategyState:
    spec: ModelSpec
    params: Params
    buffer: ReplayBuffer | None = None
    cumulative_store: Batch | None = None
    seen_count: int = 0
    experiences_trained: int = 0

    def to_bytes(self) -> bytes:
        """Serialize everything needed to resume training (npz container)."""
        arrays = {}
        for i, (w, b) in enumerate(zip(self.params.weights, self.params.biases)):
            arrays[f"w{i}"] = w
            arrays[f"b{i}"] = b
        if self.buffer is not None:
            arrays["buffer_x"] = self.buffer.features
            arrays["buffer_y"] = self.buffer.labels
        if self.cumulative_store is not None:
            arrays["store_x"] = self.cumulative_store.features
            arrays["store_y"] = self.cumulative_store.labels
        meta = {
            "spec": self.spec.to_dict(),
            "layers": self.params.num_layers,
            "buffer_seen": self.buffer.seen if self.buffer is not None else None,
            "seen_count": self.seen_count,
            "experiences_trained": self.experiences_trained,
        }
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        out = io.BytesIO()
        np.savez(out, **arrays)
        return out.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "StrategyState":
        with np.load(io.BytesIO(blob)) as data:
            meta = json.loads(data["meta"].tobytes().decode())
            n = meta["layers"]
            params = Params([data[f"w{i}"] for i in range(n)], [data[f"b{i}"] for i in range(n)])
            buffer = None
            if "buffer_x" in data:
                buffer = ReplayBuffer(data["buffer_x"], data["buffer_y"], meta["buffer_seen"])
            store = Batch(data["store_x"], data["store_y"]) if "store_x" in data else None
        return cls(
            spec=ModelSpec.from_dict(meta["spec"]),
            params=params,
            buffer=buffer,
            cumulative_store=store,
            seen_count=meta["seen_count"],
            experiences_trained=meta["experiences_trained"],
        )


def make_strategy(cfg: StrategyConfig, spec: ModelSpec, strict: bool = True) -> StrategyState:
    cfg.validate(strict)
    state = StrategyState(spec=spec, params=nn.init_params(spec))
    if cfg.name == "replay":
        state.buffer = ReplayBuffer.empty(spec.input_dim)
    elif cfg.name == "cumulative":
        state.cumulative_store = Batch(np.zeros((0, spec.input_dim), dtype=nn.DTYPE))
    return state


def buffer_update(
    buffer: ReplayBuffer,
    new_items: Batch,
    memory_size: int,
    sampling: str = "reservoir",
    seed: int | Iterable[int] = 0,
) -> ReplayBuffer:
    """Return a new buffer after streaming ``new_items`` through it.

    ``reservoir`` is classic Algorithm R: after ``n`` items have been seen,
    each one is held with probability ``memory_size / n``. ``class_balanced``
    caps every seen class at ``memory_size // classes_seen`` items and evicts
    the oldest items of a class first.
    """
    if memory_size < 1:
        raise ConfigError("memory_size must be >= 1", field="memory_size")
    if sampling not in SAMPLINGS:
        raise ConfigError(f"unknown sampling {sampling!r}", field="sampling")
    n_new = len(new_items)
    seen = buffer.seen + n_new

    if sampling == "class_balanced":
        x = np.concatenate([buffer.features, new_items.features])
        y = np.concatenate([buffer.labels, new_items.labels])
        classes = np.unique(y)
        quota = memory_size // max(len(classes), 1)
        keep = np.zeros(len(y), dtype=bool)
        for c in classes:
            idx = np.flatnonzero(y == c)
            if quota:
                keep[idx[-quota:]] = True
        return ReplayBuffer(x[keep], y[keep], seen)

    x = buffer.features.copy()
    y = buffer.labels.copy()
    fill = min(max(memory_size - len(y), 0), n_new)
    if fill:
        x = np.concatenate([x, new_items.features[:fill]])
        y = np.concatenate([y, new_items.labels[:fill]])
    rest = n_new - fill
    if rest:
        rng = np.random.default_rng(seed)
        # item t (1-based count over the whole stream) takes slot j ~ U{0..t-1} when j < memory_size
        counts = buffer.seen + fill + np.arange(1, rest + 1)
        slots = rng.integers(0, counts)
        for offset, slot in zip(range(fill, n_new), slots):
            if slot < memory_size:
                x[slot] = new_items.features[offset]
                y[slot] = new_items.labels[offset]
    return ReplayBuffer(x, y, seen)


def _plain_batches(data: Batch, batch_size: int, rng: np.random.Generator) -> Iterator[Batch]:
    perm = rng.permutation(len(data))
    for start in range(0, len(data), batch_size):
        yield data.take(perm[start : start + batch_size])


def replay_split(batch_size: int, ratio: float) -> tuple[int, int]:
    """(new, memory) slots per minibatch; at least one slot always carries new data."""
    n_mem = min(int(round(batch_size * ratio)), batch_size - 1)
    return batch_size - n_mem, n_mem


def _replay_batches(
    data: Batch, buffer: ReplayBuffer, cfg: StrategyConfig, rng: np.random.Generator
) -> Iterator[Batch]:
    n_new, n_mem = replay_split(cfg.batch_size, cfg.effective_ratio)
    if len(buffer) == 0 or n_mem == 0:
        yield from _plain_batches(data, cfg.batch_size, rng)
        return
    memory = buffer.as_batch()
    perm = rng.permutation(len(data))
    for start in range(0, len(data), n_new):
        chunk = perm[start : start + n_new]
        # a short final chunk draws proportionally fewer memory samples
        draw = min(int(round(len(chunk) * n_mem / n_new)), len(memory))
        mem_idx = rng.choice(len(memory), size=draw, replace=False)
        yield Batch.concat([data.take(chunk), memory.take(mem_idx)])


def _shuffle_rng(seed: int, step: int | None, epoch: int) -> np.random.Generator:
    key = [seed, epoch] if step is None else [seed, step, epoch]
    return np.random.default_rng(key)


def train_experience(
    state: StrategyState,
    cfg: StrategyConfig,
    exp: Experience,
    hooks: Iterable[Hook] = (),
) -> tuple[StrategyState, TrainStats]:
    """Train on one experience and return the successor state.

    The input state is left untouched. Shuffling for naive and replay is keyed
    on (seed, experiences trained so far, epoch); cumulative retrains from
    fresh weights every time and keys only on (seed, epoch), so an incremental
    run and a single run on the union see the same data order.
    """
    if len(exp.train) == 0:
        raise EmptyExperience(f"experience {exp.index} has no training patterns")
    hooks = list(hooks)

    def emit(event: HookEvent) -> None:
        for hook in hooks:
            hook(event)

    seed = state.spec.seed
    activation = state.spec.activation
    step = state.experiences_trained
    new_state = replace(state)
    emit(HookEvent("before_experience", exp.index))

    t0 = time.perf_counter()
    if cfg.name == "cumulative":
        store = state.cumulative_store if state.cumulative_store is not None else exp.train.take(slice(0, 0))
        data = Batch.concat([store, exp.train])
        params = nn.init_params(state.spec)
    else:
        data = exp.train
        params = state.params

    patterns = 0
    epoch_loss = float("nan")
    for epoch in range(cfg.epochs):
        if cfg.name == "cumulative":
            rng = _shuffle_rng(seed, None, epoch)
            batches = _plain_batches(data, cfg.batch_size, rng)
        elif cfg.name == "replay":
            rng = _shuffle_rng(seed, step, epoch)
            batches = _replay_batches(data, state.buffer or ReplayBuffer.empty(data.feature_dim), cfg, rng)
        else:
            rng = _shuffle_rng(seed, step, epoch)
            batches = _plain_batches(data, cfg.batch_size, rng)
        total, count = 0.0, 0
        for batch in batches:
            loss, grads = nn.loss_and_grad(params, batch, activation)
            params = nn.sgd_step(params, grads, cfg.lr)
            total += loss * len(batch)
            count += len(batch)
        if not params.all_finite():
            raise ClaasError(f"non-finite parameters after epoch {epoch}; lower lr", code="Diverged")
        patterns += count
        epoch_loss = total / count
        emit(HookEvent("after_epoch", exp.index, epoch, epoch_loss))

    new_state.params = params
    if cfg.name == "cumulative":
        new_state.cumulative_store = data
    elif cfg.name == "replay":
        new_state.buffer = buffer_update(
            state.buffer or ReplayBuffer.empty(data.feature_dim),
            exp.train,
            cfg.memory_size,
            cfg.effective_sampling,
            seed=[seed, step, 0xB0F],
        )
    seconds = time.perf_counter() - t0
    new_state.seen_count = state.seen_count + len(exp.train)
    new_state.experiences_trained = step + 1
    emit(HookEvent("after_experience", exp.index, cfg.epochs - 1, epoch_loss))
    return new_state, TrainStats(seconds, patterns, epoch_loss)
