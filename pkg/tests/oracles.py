"""Independent reference computations used to check the package.

None of these call into the code paths they check beyond the forward loss.
"""

from __future__ import annotations

import math

import numpy as np


def central_differences(loss_fn, arrays, h=1e-3):
    """Numerical gradient of ``loss_fn()`` w.r.t. every entry of ``arrays`` (perturbed in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + h
            plus = loss_fn()
            a[idx] = orig - h
            minus = loss_fn()
            a[idx] = orig
            g[idx] = (plus - minus) / (2 * h)
        grads.append(g)
    return grads


def relu_kink_crossed(params, x, h=1e-3):
    """Mask per parameter entry: True where a +-h nudge flips some ReLU on/off.

    Finite differences are meaningless across a kink, so those entries are
    excluded from the comparison.
    """
    masks = []

    def pattern():
        h_ = x
        pats = []
        for i, (w, b) in enumerate(zip(params.weights, params.biases)):
            z = h_ @ w + b
            if i < len(params.weights) - 1:
                pats.append(z > 0)
                h_ = np.maximum(z, 0)
        return pats

    base = pattern()
    for a in params:
        m = np.zeros(a.shape, dtype=bool)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            for delta in (h, -h):
                a[idx] = orig + delta
                if any((p != q).any() for p, q in zip(pattern(), base)):
                    m[idx] = True
            a[idx] = orig
        masks.append(m)
    return masks


def as_float64(batch):
    """Copy of ``batch`` with float64 features (Batch itself always casts to float32)."""
    out = object.__new__(type(batch))
    out.features = np.asarray(batch.features, dtype=np.float64)
    out.labels = batch.labels
    return out


def relative_error(analytic, numeric) -> float:
    """||a - n|| / (||a|| + ||n||) over the concatenated gradient vector."""
    a = np.concatenate([np.ravel(v) for v in analytic]).astype(np.float64)
    n = np.concatenate([np.ravel(v) for v in numeric]).astype(np.float64)
    denom = np.linalg.norm(a) + np.linalg.norm(n)
    return 0.0 if denom == 0 else float(np.linalg.norm(a - n) / denom)


def brute_ks(ref, cur) -> float:
    """sup |ECDF_ref - ECDF_cur| by direct counting at every sample point."""
    ref = list(map(float, ref))
    cur = list(map(float, cur))
    best = 0.0
    for t in ref + cur:
        fr = sum(1 for v in ref if v <= t) / len(ref)
        fc = sum(1 for v in cur if v <= t) / len(cur)
        best = max(best, abs(fr - fc))
    return best


def brute_psi(p_counts, q_counts) -> float:
    bins = len(p_counts)
    sp, sq = sum(p_counts) + bins, sum(q_counts) + bins
    total = 0.0
    for pc, qc in zip(p_counts, q_counts):
        p, q = (pc + 1) / sp, (qc + 1) / sq
        total += (p - q) * math.log(p / q)
    return total


def metrics_from_log(log, top_k):
    """Recompute accuracy rows and stream accuracies from a per-sample prediction log."""
    by_step = {}
    for e in log:
        by_step.setdefault(e.step, []).append(e)
    rows = {k: [] for k in top_k}
    stream = {k: [] for k in top_k}
    for step in sorted(by_step):
        entries = sorted(by_step[step], key=lambda e: e.experience)
        for k in top_k:
            row, hit_total, n_total = [], 0, 0
            for e in entries:
                hits = 0
                for label, preds in zip(e.labels.tolist(), e.topk.tolist()):
                    if label in preds[:k]:
                        hits += 1
                row.append(hits / len(e.labels))
                hit_total += hits
                n_total += len(e.labels)
            rows[k].append(row)
            stream[k].append(hit_total / n_total)
    return rows, stream
