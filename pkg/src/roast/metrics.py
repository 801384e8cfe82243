"""Robustness metrics: accuracy, ECE, MSP-AUROC, relative improvement, rank."""

from __future__ import annotations

import math
import warnings
from dataclasses import astuple, dataclass, fields

import numpy as np
from scipy.stats import rankdata

METRICS = ("acc_in", "acc_shift", "acc_adv", "ece", "auroc")
# best attainable value per metric; ECE is lower-is-better
BEST = {"acc_in": 100.0, "acc_shift": 100.0, "acc_adv": 100.0, "ece": 0.0, "auroc": 1.0}
HIGHER_IS_BETTER = {m: m != "ece" for m in METRICS}

PAIRWISE_LIMIT = 10_000


@dataclass
class MetricVector:
    acc_in: float
    acc_shift: float
    acc_adv: float
    ece: float
    auroc: float  # fraction in [0, 1]

    def __post_init__(self):
        for name in ("acc_in", "acc_shift", "acc_adv", "ece"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name}={v} outside [0, 100]")
        if not 0.0 <= self.auroc <= 1.0:
            raise ValueError(f"auroc={self.auroc} outside [0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _check_probs(probs) -> np.ndarray:
    P = np.asarray(probs, dtype=float)
    if P.ndim != 2 or P.shape[0] == 0:
        raise ValueError("need a non-empty (N, C) array of distributions")
    if not np.allclose(P.sum(axis=1), 1.0, atol=1e-9, rtol=0):
        raise ValueError("each row must sum to 1")
    return P


def accuracy(probs, labels) -> float:
    """Percent of rows whose argmax (lowest index on ties) equals the label."""
    P = _check_probs(probs)
    y = np.asarray(labels)
    if y.shape != (P.shape[0],):
        raise ValueError("one label per row required")
    return 100.0 * float(np.mean(P.argmax(axis=1) == y))


def calibration_bins(confidence, correct, bins: int = 10):
    """Per-bin (count, accuracy, mean confidence) over right-closed bins of (0, 1]."""
    conf = np.asarray(confidence, dtype=float)
    hit = np.asarray(correct, dtype=float)
    # bin b covers (edges[b], edges[b+1]]; 0 falls into the first bin
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    acc = np.bincount(idx, weights=hit, minlength=bins)
    mean_conf = np.bincount(idx, weights=conf, minlength=bins)
    nz = counts > 0
    acc[nz] /= counts[nz]
    mean_conf[nz] /= counts[nz]
    return counts, acc, mean_conf


def expected_calibration_error(probs, labels, bins: int = 10) -> float:
    P = _check_probs(probs)
    y = np.asarray(labels)
    conf = P.max(axis=1)
    correct = P.argmax(axis=1) == y
    counts, acc, mean_conf = calibration_bins(conf, correct, bins)
    return 100.0 * float(np.sum(counts / counts.sum() * np.abs(acc - mean_conf)))


def auroc(in_scores, out_scores) -> float:
    """P(out score > in score), ties counting one half."""
    a = np.asarray(in_scores, dtype=float).reshape(-1)
    b = np.asarray(out_scores, dtype=float).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ValueError("both score sets must be non-empty")
    if a.size <= PAIRWISE_LIMIT and b.size <= PAIRWISE_LIMIT:
        wins = 0.0
        for chunk in np.array_split(b, max(1, b.size * a.size // 2_000_000 + 1)):
            diff = chunk[:, None] - a[None, :]
            wins += np.count_nonzero(diff > 0) + 0.5 * np.count_nonzero(diff == 0)
        return float(wins / (a.size * b.size))
    ranks = rankdata(np.concatenate([a, b]))
    u = ranks[a.size:].sum() - b.size * (b.size + 1) / 2.0
    return float(u / (a.size * b.size))


def auroc_msp(in_probs, anomaly_probs) -> float:
    """AUROC of the anomaly score 1 - max softmax probability."""
    pin = _check_probs(in_probs)
    pout = _check_probs(anomaly_probs)
    return auroc(1.0 - pin.max(axis=1), 1.0 - pout.max(axis=1))


def relative_improvement_terms(method: MetricVector, base: MetricVector) -> dict[str, float | None]:
    """Per-metric ``(s - s_base) / (s_best - s_base)``; None where undefined."""
    out: dict[str, float | None] = {}
    for m in METRICS:
        s, sb = getattr(method, m), getattr(base, m)
        denom = BEST[m] - sb
        out[m] = None if denom == 0 else (s - sb) / denom
    return out


def relative_improvement(method: MetricVector, base: MetricVector) -> float:
    """Average relative improvement over the five metrics, in percent.

    A metric whose baseline already sits at its best value is dropped from
    the average (with a warning) instead of dividing by zero.
    """
    terms = relative_improvement_terms(method, base)
    used = [v for v in terms.values() if v is not None]
    dropped = [k for k, v in terms.items() if v is None]
    if dropped:
        warnings.warn(f"baseline at best value for {dropped}; excluded from average", stacklevel=2)
    if not used:
        return 0.0
    return 100.0 * float(np.mean(used))


def metric_ranks(methods: list[MetricVector]) -> np.ndarray:
    """(n_methods, 5) ranks; 1 is best, ties share their mean rank."""
    if len(methods) < 2:
        raise ValueError("ranking needs at least two methods")
    M = np.stack([m.as_array() for m in methods])
    cols = []
    for j, m in enumerate(METRICS):
        col = -M[:, j] if HIGHER_IS_BETTER[m] else M[:, j]
        cols.append(rankdata(col, method="average"))
    return np.stack(cols, axis=1)


def average_rank(methods: list[MetricVector]) -> np.ndarray:
    return metric_ranks(methods).mean(axis=1)


def mean_std(values) -> tuple[float, float]:
    """Mean and population standard deviation (0 for a single value)."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std())
