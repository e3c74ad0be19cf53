"""In-process experiment runner shared by the worker and the benchmark command."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .evaluation import DEFAULT_TOP_K, RunRecord, SeedRecord, aggregate, evaluate_step
from .nn import ModelSpec
from .scenario import Scenario, build_nc_scenario, synth_blobs
from .strategies import Hook, StrategyConfig, StrategyState, make_strategy, train_experience


def run_seeds_for(spec: ModelSpec, runs: int) -> list[int]:
    """Seed of each repeated run: the model seed, then consecutive integers."""
    return [spec.seed + r for r in range(runs)]


def run_stream(
    spec: ModelSpec,
    cfg: StrategyConfig,
    scenario: Scenario,
    top_k: Sequence[int] = DEFAULT_TOP_K,
    hooks: Iterable[Hook] = (),
    strict: bool = True,
) -> tuple[StrategyState, SeedRecord]:
    """Train over every experience of ``scenario`` and evaluate after each step."""
    state = make_strategy(cfg, spec, strict=strict)
    record = SeedRecord(seed=spec.seed, protocol=scenario.protocol, top_k=tuple(top_k))
    tests = [e.test for e in scenario.experiences]
    hooks = list(hooks)
    for i, exp in enumerate(scenario.experiences):
        state, stats = train_experience(state, cfg, exp, hooks)
        record.trace.append(stats.seconds, stats.patterns_trained_on)
        evaluate_step(record, state.params, tests, i, spec.activation)
    record.completed = True
    return state, record


def run_seeds(
    spec: ModelSpec,
    cfg: StrategyConfig,
    scenario: Scenario,
    seeds: Sequence[int],
    top_k: Sequence[int] = DEFAULT_TOP_K,
) -> RunRecord:
    records = [run_stream(replace(spec, seed=s), cfg, scenario, top_k)[1] for s in seeds]
    return aggregate(records)


@dataclass(frozen=True)
class Preset:
    """A synthetic class-incremental benchmark with a fixed data seed."""

    num_classes: int
    feature_dim: int
    per_class_train: int
    per_class_test: int
    spread: float
    first_size: int
    rest_size: int
    n_experiences: int
    data_seed: int
    hidden_layers: tuple[int, ...]
    epochs: int
    batch_size: int
    lr: float

    def scenario(self, protocol: str = "accumulating_test") -> Scenario:
        train, test = synth_blobs(
            self.num_classes, self.feature_dim, self.per_class_train, self.per_class_test, self.spread, self.data_seed
        )
        return build_nc_scenario(
            train,
            test,
            self.num_classes,
            self.first_size,
            self.rest_size,
            self.n_experiences,
            self.data_seed,
            protocol=protocol,
        )

    def model_spec(self, seed: int = 0) -> ModelSpec:
        return ModelSpec(self.feature_dim, self.hidden_layers, self.num_classes, "relu", seed)

    def strategy(self, name: str, memory_size: int = 2000, replay_ratio: float = 0.5) -> StrategyConfig:
        if name == "replay":
            return StrategyConfig(
                name, self.epochs, self.batch_size, self.lr, memory_size=memory_size, replay_ratio=replay_ratio
            )
        return StrategyConfig(name, self.epochs, self.batch_size, self.lr)


# 20 classes split [2] * 10, 1000 training patterns per experience.
PRESETS = {
    "blobs10": Preset(
        num_classes=20,
        feature_dim=16,
        per_class_train=500,
        per_class_test=100,
        spread=0.8,
        first_size=2,
        rest_size=2,
        n_experiences=10,
        data_seed=7,
        hidden_layers=(64,),
        epochs=5,
        batch_size=32,
        lr=0.05,
    ),
}


TIME_MEMORY_COLUMNS = ("experience", "seconds_mean", "seconds_std", "patterns_mean", "patterns_std", "runs")
ACCURACY_COLUMNS = (
    "experience",
    "acc_top1_mean",
    "acc_top1_std",
    "acc_top5_mean",
    "acc_top5_std",
    "avg_acc_mean",
    "avg_acc_std",
    "forgetting_mean_mean",
    "forgetting_mean_std",
    "runs",
)


def bench_tables(mean: dict, std: dict, runs: int) -> tuple[str, str]:
    """Render (time_memory.csv, accuracy.csv) from aggregated per-experience series."""
    from .evaluation import rows_to_csv

    n = len(mean["seconds"])
    time_rows, acc_rows = [], []
    for i in range(n):
        time_rows.append(
            {
                "experience": i,
                "seconds_mean": mean["seconds"][i],
                "seconds_std": std["seconds"][i],
                "patterns_mean": mean["patterns"][i],
                "patterns_std": std["patterns"][i],
                "runs": runs,
            }
        )
        row = {"experience": i, "runs": runs}
        for col in ("acc_top1", "acc_top5", "avg_acc", "forgetting_mean"):
            row[f"{col}_mean"] = mean[col][i]
            row[f"{col}_std"] = std[col][i]
        acc_rows.append(row)
    return rows_to_csv(time_rows, TIME_MEMORY_COLUMNS), rows_to_csv(acc_rows, ACCURACY_COLUMNS)


def preset_config(preset: Preset, strategy: str, seeds: Sequence[int], memory_size: int = 2000) -> dict:
    """Experiment config reproducing ``preset`` through the REST service."""
    seeds = list(seeds)
    if seeds != list(range(seeds[0], seeds[0] + len(seeds))):
        raise ValueError("service runs use consecutive seeds; pass e.g. 1,2,3")
    return {
        "model": preset.model_spec(seeds[0]).to_dict(),
        "strategy": preset.strategy(strategy, memory_size=memory_size).to_dict(),
        "scenario": {
            "first_size": preset.first_size,
            "rest_size": preset.rest_size,
            "n_experiences": preset.n_experiences,
            "seed": preset.data_seed,
            "synthetic": {
                "per_class_train": preset.per_class_train,
                "per_class_test": preset.per_class_test,
                "spread": preset.spread,
                "seed": preset.data_seed,
            },
        },
        "trigger": {"mode": "manual"},
        "evaluation": {"top_k": [1, 5], "protocol": "accumulating_test"},
        "runs": len(seeds),
    }
