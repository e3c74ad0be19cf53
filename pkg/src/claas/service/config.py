"""Experiment configuration schema (the JSON body of POST /v1/experiments)."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..drift import DriftConfig
from ..errors import ClaasError, ConfigError
from ..nn import ModelSpec
from ..strategies import StrategyConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Strict):
    input_dim: int = Field(ge=1)
    hidden_layers: list[int] = Field(default_factory=list)
    num_classes: int = Field(ge=2)
    activation: Literal["relu", "tanh"] = "relu"
    seed: int = Field(default=0, ge=0, lt=2**64)


class StrategySection(_Strict):
    name: Literal["naive", "cumulative", "replay"]
    epochs: int = Field(default=1, ge=1)
    batch_size: int = Field(default=32, ge=1)
    lr: float = Field(default=0.05, gt=0)
    memory_size: Optional[int] = Field(default=None, ge=1)
    replay_ratio: Optional[float] = Field(default=None, gt=0, le=1)
    sampling: Optional[Literal["reservoir", "class_balanced"]] = None


class SyntheticSource(_Strict):
    per_class_train: int = Field(ge=1)
    per_class_test: int = Field(ge=1)
    spread: float = Field(gt=0)
    seed: int = Field(default=0, ge=0)


class ScenarioSection(_Strict):
    first_size: int = Field(ge=1)
    rest_size: int = Field(ge=1)
    n_experiences: int = Field(ge=1)
    seed: int = Field(default=0, ge=0)
    synthetic: Optional[SyntheticSource] = None
    manifest: Optional[str] = None

    @model_validator(mode="after")
    def _one_source(self):
        if self.synthetic is not None and self.manifest is not None:
            raise ValueError("give at most one of 'synthetic' and 'manifest'")
        return self


class TriggerRule(_Strict):
    mode: Literal["manual", "every_n_experiences", "on_drift"] = "manual"
    n: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _n_for_schedule(self):
        if self.mode == "every_n_experiences" and self.n is None:
            raise ValueError("n is required when mode is every_n_experiences")
        return self


class DriftSection(_Strict):
    detector: Literal["perf_decay", "ks", "psi"]
    alpha: float = Field(default=0.05, gt=0, lt=1)
    window: int = Field(default=200, ge=20)
    decay_delta: float = Field(default=0.1, ge=0, le=1)
    psi_threshold: float = Field(default=0.2, gt=0)
    bins: int = Field(default=10, ge=2)


class EvaluationSection(_Strict):
    top_k: list[int] = Field(default_factory=lambda: [1, 5], min_length=1)
    protocol: Literal["full_test", "accumulating_test"] = "accumulating_test"


class ExperimentConfig(_Strict):
    experiment_id: Optional[str] = Field(default=None, pattern=r"^[A-Za-z0-9_-][A-Za-z0-9_.-]{0,63}$")
    model: ModelSection
    strategy: StrategySection
    scenario: Optional[ScenarioSection] = None
    trigger: TriggerRule = Field(default_factory=TriggerRule)
    drift: Optional[DriftSection] = None
    evaluation: EvaluationSection = Field(default_factory=EvaluationSection)
    runs: int = Field(default=3, ge=1)

    def model_spec(self, run: int = 0) -> ModelSpec:
        d = self.model.model_dump()
        d["seed"] = d["seed"] + run
        return ModelSpec.from_dict(d)

    def strategy_config(self) -> StrategyConfig:
        return StrategyConfig(**self.strategy.model_dump())

    def drift_config(self) -> DriftConfig | None:
        return None if self.drift is None else DriftConfig(**self.drift.model_dump())

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")


class ConfigValidationError(ClaasError):
    code = "ValidationError"


def _path(loc) -> str:
    return ".".join(str(p) for p in loc if not str(p).startswith("function-after"))


def parse_config(doc) -> ExperimentConfig:
    """Validate the whole document; raise with the offending field path on failure."""
    try:
        cfg = ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        err = exc.errors()[0]
        field = _path(err["loc"])
        kind = err["type"]
        if field == "strategy.name" and kind == "literal_error":
            code = "UnknownStrategy"
        elif kind == "missing":
            code = "MissingField"
        elif kind == "extra_forbidden":
            code = "UnknownField"
        else:
            code = "ValidationError"
        detail = f"{field or '<root>'}: {err['msg']}"
        if len(exc.errors()) > 1:
            detail += f" (and {len(exc.errors()) - 1} more)"
        raise ConfigValidationError(detail, code=code, field=field or None) from exc

    try:
        cfg.strategy_config().validate(strict=True)
        cfg.model_spec()
        cfg.drift_config()
    except ConfigError as exc:
        section = "strategy" if exc.code in ("IrrelevantField", "MissingField", "UnknownStrategy") else "model"
        raise ConfigValidationError(
            exc.detail, code=exc.code, field=f"{section}.{exc.field}" if exc.field else section
        ) from exc
    if cfg.scenario is not None:
        sc = cfg.scenario
        needed = sc.first_size + (sc.n_experiences - 1) * sc.rest_size
        if needed > cfg.model.num_classes:
            raise ConfigValidationError(
                f"scenario needs {needed} classes but model.num_classes is {cfg.model.num_classes}",
                code="InsufficientClasses",
                field="scenario",
            )
    for k in cfg.evaluation.top_k:
        if not 1 <= k:
            raise ConfigValidationError("top_k entries must be >= 1", field="evaluation.top_k")
    return cfg
