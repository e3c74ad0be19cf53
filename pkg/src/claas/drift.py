"""Drift detectors: performance decay (supervised), KS and PSI (unsupervised).

A monitor keeps a reference window (the first ``window`` observations after
a (re)training) and compares each later tumbling window against it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BinError, ConfigError, DataError, WindowError

DETECTORS = ("perf_decay", "ks", "psi")
MIN_WINDOW = 20


@dataclass(frozen=True)
class DriftConfig:
    detector: str
    alpha: float = 0.05
    window: int = 200
    decay_delta: float = 0.1
    psi_threshold: float = 0.2
    bins: int = 10

    def __post_init__(self):
        if self.detector not in DETECTORS:
            raise ConfigError(f"unknown detector {self.detector!r}", field="detector")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)", field="alpha")
        if self.window < MIN_WINDOW:
            raise ConfigError(f"window must be >= {MIN_WINDOW}", field="window")
        if not 0 <= self.decay_delta <= 1:
            raise ConfigError("decay_delta must lie in [0, 1]", field="decay_delta")
        if not self.psi_threshold > 0:
            raise ConfigError("psi_threshold must be positive", field="psi_threshold")
        if self.bins < 2:
            raise ConfigError("bins must be >= 2", field="bins")

    def to_dict(self) -> dict:
        return {
            "detector": self.detector,
            "alpha": self.alpha,
            "window": self.window,
            "decay_delta": self.decay_delta,
            "psi_threshold": self.psi_threshold,
            "bins": self.bins,
        }


@dataclass(frozen=True)
class DriftReport:
    fired: bool
    detector: str
    statistic: float
    threshold: float
    window_id: int
    per_feature: list[tuple[int, float]] | None = None

    def to_dict(self) -> dict:
        return {
            "fired": self.fired,
            "detector": self.detector,
            "statistic": self.statistic,
            "threshold": self.threshold,
            "window_id": self.window_id,
            "per_feature": None if self.per_feature is None else [[i, s] for i, s in self.per_feature],
        }


def ks_two_sample(ref, cur) -> float:
    """Two-sample Kolmogorov-Smirnov statistic sup |F_ref - F_cur|."""
    a = np.sort(np.asarray(ref, dtype=np.float64).ravel())
    b = np.sort(np.asarray(cur, dtype=np.float64).ravel())
    if a.size < MIN_WINDOW or b.size < MIN_WINDOW:
        raise WindowError(f"KS needs at least {MIN_WINDOW} samples per side, got {a.size} and {b.size}")
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def ks_critical_value(alpha: float, n: int, m: int) -> float:
    """Asymptotic rejection threshold c(alpha) * sqrt((n + m) / (n m))."""
    c = math.sqrt(-math.log(alpha / 2) / 2)
    return c * math.sqrt((n + m) / (n * m))


def psi(ref_hist, cur_hist, bins: int) -> float:
    """Population stability index of two histograms over the same bins (+1 smoothing)."""
    p = np.asarray(ref_hist, dtype=np.float64)
    q = np.asarray(cur_hist, dtype=np.float64)
    if p.shape != (bins,) or q.shape != (bins,):
        raise BinError(f"expected {bins} bins, got {p.shape} and {q.shape}")
    if (p < 0).any() or (q < 0).any():
        raise BinError("histogram counts must be non-negative")
    p = (p + 1) / (p.sum() + bins)
    q = (q + 1) / (q.sum() + bins)
    return float(np.sum((p - q) * np.log(p / q)))


def quantile_edges(ref, bins: int) -> np.ndarray:
    """Interior bin edges at the reference quantiles (``bins - 1`` values)."""
    return np.quantile(np.asarray(ref, dtype=np.float64), np.linspace(0, 1, bins + 1)[1:-1])


def histogram(values, edges: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(edges, np.asarray(values, dtype=np.float64), side="right")
    return np.bincount(idx, minlength=len(edges) + 1)


def psi_samples(ref, cur, bins: int = 10) -> float:
    edges = quantile_edges(ref, bins)
    return psi(histogram(ref, edges), histogram(cur, edges), bins)


def perf_decay(
    baseline_acc: float, window_labels, window_preds, decay_delta: float, window_id: int = 0
) -> DriftReport:
    labels = np.asarray(window_labels)
    preds = np.asarray(window_preds)
    if labels.size == 0:
        raise WindowError("empty window")
    if labels.shape != preds.shape:
        raise DataError("labels and predictions differ in length")
    acc = float(np.mean(labels == preds))
    threshold = baseline_acc - decay_delta
    return DriftReport(acc < threshold, "perf_decay", acc, threshold, window_id)


def _as_matrix(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise DataError(f"samples must be 1-D or 2-D, got shape {x.shape}")
    return x


def compare_windows(cfg: DriftConfig, ref: np.ndarray, cur: np.ndarray, window_id: int) -> DriftReport:
    """Unsupervised verdict for one window; a feature fires at level alpha / n_features."""
    ref, cur = _as_matrix(ref), _as_matrix(cur)
    if ref.shape[1] != cur.shape[1]:
        raise DataError(f"reference has {ref.shape[1]} features, window has {cur.shape[1]}")
    n_features = ref.shape[1]
    if cfg.detector == "ks":
        stats = [ks_two_sample(ref[:, f], cur[:, f]) for f in range(n_features)]
        threshold = ks_critical_value(cfg.alpha / n_features, len(ref), len(cur))
    elif cfg.detector == "psi":
        stats = [psi_samples(ref[:, f], cur[:, f], cfg.bins) for f in range(n_features)]
        threshold = cfg.psi_threshold
    else:
        raise ConfigError(f"{cfg.detector} is not an unsupervised detector")
    statistic = max(stats)
    return DriftReport(statistic > threshold, cfg.detector, statistic, threshold, window_id, list(enumerate(stats)))


@dataclass
class MonitorState:
    config: DriftConfig
    baseline_acc: float | None = None
    reference: np.ndarray | None = None
    pending: np.ndarray | None = None
    pending_labels: np.ndarray | None = None
    pending_preds: np.ndarray | None = None
    window_id: int = 0
    history: list[DriftReport] = field(default_factory=list)

    @property
    def buffered(self) -> int:
        if self.config.detector == "perf_decay":
            return 0 if self.pending_labels is None else len(self.pending_labels)
        return 0 if self.pending is None else len(self.pending)


def reset_reference(state: MonitorState, baseline_acc: float | None = None) -> MonitorState:
    """Start over after a retraining: drop the reference and any partial window."""
    return replace(
        state,
        baseline_acc=state.baseline_acc if baseline_acc is None else baseline_acc,
        reference=None,
        pending=None,
        pending_labels=None,
        pending_preds=None,
        history=list(state.history),
    )


def observe(
    state: MonitorState, samples=None, labels=None, preds=None
) -> tuple[MonitorState, list[DriftReport]]:
    """Buffer new observations and emit one report per completed window."""
    cfg = state.config
    w = cfg.window
    new = replace(state, history=list(state.history))
    reports: list[DriftReport] = []

    if cfg.detector == "perf_decay":
        if labels is None or preds is None:
            raise DataError("perf_decay needs labels and predictions")
        if new.baseline_acc is None:
            raise DataError("perf_decay has no baseline accuracy yet")
        labels = np.asarray(labels, dtype=np.int64).ravel()
        preds = np.asarray(preds, dtype=np.int64).ravel()
        if labels.shape != preds.shape:
            raise DataError("labels and predictions differ in length")
        lab = labels if new.pending_labels is None else np.concatenate([new.pending_labels, labels])
        prd = preds if new.pending_preds is None else np.concatenate([new.pending_preds, preds])
        while len(lab) >= w:
            reports.append(perf_decay(new.baseline_acc, lab[:w], prd[:w], cfg.decay_delta, new.window_id))
            new.window_id += 1
            lab, prd = lab[w:], prd[w:]
        new.pending_labels, new.pending_preds = lab, prd
    else:
        if samples is None:
            raise DataError(f"{cfg.detector} needs feature samples")
        x = _as_matrix(samples)
        if new.pending is not None:
            if new.pending.shape[1] != x.shape[1]:
                raise DataError("feature count changed between observations")
            x = np.concatenate([new.pending, x])
        if new.reference is not None and new.reference.shape[1] != x.shape[1]:
            raise DataError("feature count differs from the reference window")
        while len(x) >= w:
            window, x = x[:w], x[w:]
            if new.reference is None:
                # the reference window reports against itself and never fires
                new.reference = window
            reports.append(compare_windows(cfg, new.reference, window, new.window_id))
            new.window_id += 1
        new.pending = x

    new.history.extend(reports)
    return new, reports
