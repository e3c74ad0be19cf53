"""Dataset ingestion and New-Classes (class-incremental) stream construction."""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import ConfigError, InsufficientClasses, LabelError, ParseError, RangeError
from .nn import DTYPE, Batch

logger = logging.getLogger(__name__)

PROTOCOLS = ("full_test", "accumulating_test")


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    feature_dim: int
    num_classes: int
    train_path: str
    test_path: str
    format: Literal["csv"] = "csv"

    _FIELDS = ("name", "feature_dim", "num_classes", "train_path", "test_path", "format")

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2", field="num_classes")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1", field="feature_dim")
        if self.format != "csv":
            raise ConfigError(f"unsupported format {self.format!r}", field="format")

    @classmethod
    def from_json(cls, text: str, base_dir: str | Path | None = None) -> "DatasetManifest":
        doc = json.loads(text)
        if not isinstance(doc, dict):
            raise ConfigError("manifest must be a JSON object")
        extra = set(doc) - set(cls._FIELDS)
        missing = set(cls._FIELDS) - set(doc)
        if extra:
            raise ConfigError(f"unknown manifest fields: {sorted(extra)}", field=sorted(extra)[0])
        if missing:
            raise ConfigError(f"missing manifest fields: {sorted(missing)}", field=sorted(missing)[0])
        if base_dir is not None:
            for key in ("train_path", "test_path"):
                p = Path(doc[key])
                if not p.is_absolute():
                    doc[key] = str(Path(base_dir) / p)
        return cls(**doc)

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        return cls.from_json(path.read_text(), base_dir=path.parent)

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in self._FIELDS})


@dataclass
class Experience:
    index: int
    class_set: list[int]
    train: Batch
    test: Batch

    def __post_init__(self):
        if not self.class_set:
            raise ConfigError("experience class_set must be non-empty")
        self.class_set = sorted(int(c) for c in self.class_set)
        allowed = np.asarray(self.class_set)
        for split, batch in (("train", self.train), ("test", self.test)):
            if len(batch) and not np.isin(batch.labels, allowed).all():
                raise LabelError(f"{split} split of experience {self.index} has labels outside its class set")


@dataclass
class Scenario:
    experiences: list[Experience]
    protocol: str = "accumulating_test"
    seed: int = 0

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}", field="protocol")
        seen: set[int] = set()
        for exp in self.experiences:
            overlap = seen.intersection(exp.class_set)
            if overlap:
                raise ConfigError(f"class sets overlap on {sorted(overlap)}")
            seen.update(exp.class_set)

    def __len__(self) -> int:
        return len(self.experiences)

    @property
    def feature_dim(self) -> int:
        return self.experiences[0].train.feature_dim


def parse_csv(text: str, feature_dim: int, num_classes: int) -> Batch:
    """Parse headerless ``label,f1,...,fF`` rows. Blank lines are skipped."""
    labels: list[int] = []
    rows: list[list[float]] = []
    for lineno, line in enumerate(io.StringIO(text), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != feature_dim + 1:
            raise ParseError(
                f"line {lineno}: expected {feature_dim + 1} fields, got {len(parts)}", line=lineno
            )
        try:
            label = int(parts[0])
            feats = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}", line=lineno) from exc
        if not 0 <= label < num_classes:
            raise LabelError(f"line {lineno}: label {label} outside [0, {num_classes})", line=lineno)
        if not np.all(np.isfinite(feats)):
            raise ParseError(f"line {lineno}: non-finite feature", line=lineno)
        labels.append(label)
        rows.append(feats)
    if not rows:
        raise ParseError("EmptyDataset: no data rows", code="EmptyDataset")
    return Batch(np.asarray(rows, dtype=DTYPE), np.asarray(labels, dtype=np.int64))


def format_csv(batch: Batch) -> str:
    """Inverse of :func:`parse_csv`; float32 values are written with round-trip precision."""
    lines = []
    for label, row in zip(batch.labels, batch.features):
        lines.append(",".join([str(int(label)), *(repr(float(v)) for v in row)]))
    return "\n".join(lines) + ("\n" if lines else "")


def ingest_csv(manifest: DatasetManifest) -> tuple[Batch, Batch]:
    out = []
    for path in (manifest.train_path, manifest.test_path):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ParseError(f"cannot read {path}: {exc}") from exc
        out.append(parse_csv(text, manifest.feature_dim, manifest.num_classes))
    return out[0], out[1]


def nc_class_counts(first_size: int, rest_size: int, n_experiences: int) -> list[int]:
    return [first_size] + [rest_size] * (n_experiences - 1)


def build_nc_scenario(
    train: Batch,
    test: Batch,
    num_classes: int,
    first_size: int,
    rest_size: int,
    n_experiences: int,
    seed: int,
    protocol: str = "accumulating_test",
) -> Scenario:
    """Split a dataset into ``n_experiences`` experiences with disjoint class sets.

    Classes are assigned through a seeded permutation: experience 0 receives
    ``first_size`` classes and every later experience ``rest_size``. Patterns
    keep their source order inside an experience. Classes left over when the
    split does not exhaust ``num_classes`` are dropped.
    """
    if n_experiences < 1 or first_size < 1 or (n_experiences > 1 and rest_size < 1):
        raise ConfigError("experience count and class set sizes must be >= 1")
    counts = nc_class_counts(first_size, rest_size, n_experiences)
    needed = sum(counts)
    if needed > num_classes:
        raise InsufficientClasses(f"split needs {needed} classes, dataset has {num_classes}")

    order = np.random.default_rng(seed).permutation(num_classes)
    if needed < num_classes:
        dropped = sorted(int(c) for c in order[needed:])
        logger.warning("dropping %d unassigned classes: %s", len(dropped), dropped)

    experiences = []
    start = 0
    for i, n in enumerate(counts):
        classes = sorted(int(c) for c in order[start : start + n])
        start += n
        experiences.append(
            Experience(
                index=i,
                class_set=classes,
                train=train.take(np.isin(train.labels, classes)),
                test=test.take(np.isin(test.labels, classes)),
            )
        )
    return Scenario(experiences, protocol=protocol, seed=seed)


def synth_blobs(
    num_classes: int,
    feature_dim: int,
    per_class_train: int,
    per_class_test: int,
    spread: float,
    seed: int,
) -> tuple[Batch, Batch]:
    """Isotropic Gaussian clusters around seeded unit-variance centers.

    Rows are grouped by class (class 0 first); both splits are drawn from the
    same generator so a seed fixes the whole dataset.
    """
    if min(num_classes, feature_dim, per_class_train, per_class_test) < 1:
        raise ConfigError("all counts must be >= 1")
    if not spread > 0:
        raise ConfigError("spread must be positive", field="spread")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 1.0, size=(num_classes, feature_dim))

    def draw(per_class: int) -> Batch:
        labels = np.repeat(np.arange(num_classes), per_class)
        noise = rng.normal(0.0, spread, size=(labels.size, feature_dim))
        return Batch((centers[labels] + noise).astype(DTYPE), labels)

    train = draw(per_class_train)
    test = draw(per_class_test)
    return train, test


def test_stream(scenario: Scenario, upto: int) -> Batch:
    """Test patterns seen by an evaluation after training step ``upto``."""
    n = len(scenario)
    if not 0 <= upto < n:
        raise RangeError(f"upto={upto} outside [0, {n})")
    last = upto if scenario.protocol == "accumulating_test" else n - 1
    return Batch.concat([e.test for e in scenario.experiences[: last + 1]], scenario.feature_dim)


test_stream.__test__ = False  # keep pytest from collecting it when imported into tests
