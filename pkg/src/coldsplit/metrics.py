"""Scoring and aggregation: AUROC, AUPRC, Brier, ECE, risk-coverage, AUSPC.

AUROC uses the rank (Mann-Whitney) formulation with tied pairs counted 0.5.
AUPRC is step-wise average precision; because step AP depends on the order of
tied scores, it is reported as the mean over 10 seeded random tie-shuffles
together with the spread, which exposes rather than hides tie sensitivity.
Degenerate (single-class) inputs yield None for ranking metrics and are
excluded from macro means but flagged in reports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ._util import average_ranks, substream
from .errors import MetricError

AUPRC_TIE_SHUFFLES = 10
AUPRC_TIE_SEED = 0x5EED_A9
DEFAULT_COVERAGES = (1.0, 0.9, 0.8, 0.7, 0.5, 0.3, 0.1, 0.05)

MACRO_MEAN = "MACRO_MEAN"
POOLED = "POOLED"


def auroc(scores, labels) -> Optional[float]:
    """(concordant + 0.5 * tied) / (n_pos * n_neg); None when single-class."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise MetricError("scores/labels length mismatch")
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = average_ranks(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _average_precision(scores, labels, order_perm) -> float:
    # Descending score; ties resolved by the supplied permutation.
    order = np.lexsort((order_perm, -scores))
    y = labels[order]
    hits = np.cumsum(y)
    ks = np.arange(1, len(y) + 1)
    return float((hits[y] / ks[y]).mean())


def auprc(scores, labels) -> Optional[float]:
    """Average precision, mean over seeded random tie-orders."""
    mean, _ = auprc_with_spread(scores, labels)
    return mean


def auprc_with_spread(scores, labels, n_shuffles: int = AUPRC_TIE_SHUFFLES):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if not labels.any():
        return None, None
    n = len(scores)
    vals = []
    for r in range(n_shuffles):
        perm = substream(AUPRC_TIE_SEED, r).permutation(n)
        vals.append(_average_precision(scores, labels, perm))
    return float(np.mean(vals)), float(np.max(vals) - np.min(vals))


def brier(probs, labels) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    _check_probs(probs)
    return float(np.mean((probs - labels) ** 2))


def ece10(probs, labels) -> float:
    """Expected calibration error over 10 equal-width bins on [0, 1].

    Bin edges are i/10 with the last bin right-closed; empty bins contribute 0.
    Invariant to prediction order.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    _check_probs(probs)
    n = probs.size
    if n == 0:
        return 0.0
    bins = np.minimum((probs * 10).astype(int), 9)
    total = 0.0
    for b in range(10):
        mask = bins == b
        nb = int(mask.sum())
        if nb == 0:
            continue
        total += (nb / n) * abs(labels[mask].mean() - probs[mask].mean())
    return float(total)


def _check_probs(probs):
    if probs.size and (probs.min() < 0.0 or probs.max() > 1.0):
        raise MetricError("probabilities outside [0, 1]")


@dataclass
class RiskCoveragePoint:
    coverage: float
    n_kept: int
    auroc: Optional[float]
    degenerate: bool


def risk_coverage(probs, labels, coverages: Sequence[float] = DEFAULT_COVERAGES):
    """Selective-prediction AUROC at decreasing coverage.

    Confidence is max(p, 1-p); at coverage c the ceil(c*n) most confident
    predictions are kept (ties by stable input order).  Retained sets that go
    single-class are marked degenerate rather than scored.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    _check_probs(probs)
    for c in coverages:
        if not (0.0 < c <= 1.0):
            raise MetricError(f"coverage {c} outside (0, 1]")
    conf = np.maximum(probs, 1.0 - probs)
    order = np.argsort(-conf, kind="stable")
    out = []
    for c in coverages:
        m = int(math.ceil(c * len(probs)))
        kept = order[:m]
        a = auroc(probs[kept], labels[kept])
        out.append(RiskCoveragePoint(float(c), m, a, a is None))
    return out


@dataclass
class FoldScore:
    """Per-fold scoring row feeding macro aggregation and score tables."""

    fold_key: str
    n: int
    pos_rate: float
    auroc: Optional[float]
    auprc: Optional[float]
    auprc_spread: Optional[float]
    brier: float
    ece10: float
    degenerate: bool


def score_fold(fold_key: str, probs, labels) -> FoldScore:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    a = auroc(probs, labels)
    ap, spread = auprc_with_spread(probs, labels)
    return FoldScore(
        fold_key=fold_key,
        n=int(labels.size),
        pos_rate=float(labels.mean()) if labels.size else 0.0,
        auroc=a,
        auprc=ap,
        auprc_spread=spread,
        brier=brier(probs, labels),
        ece10=ece10(probs, labels),
        degenerate=a is None,
    )


@dataclass
class FoldEval:
    """Raw per-fold predictions; what POOLED aggregation concatenates."""

    fold_key: str
    probs: np.ndarray
    labels: np.ndarray


def aggregate(folds: Sequence, mode: str) -> float:
    """MACRO_MEAN: unweighted mean of per-fold AUROC over non-degenerate folds.
    POOLED: AUROC on the concatenated predictions of all folds."""
    if mode == MACRO_MEAN:
        vals = []
        for f in folds:
            a = f.auroc if isinstance(f, FoldScore) else auroc(f.probs, f.labels)
            if a is not None:
                vals.append(a)
        if not vals:
            raise MetricError("all folds degenerate; macro mean undefined")
        return float(np.mean(vals))
    if mode == POOLED:
        evals = [f for f in folds if isinstance(f, FoldEval)]
        if not evals:
            raise MetricError("pooled aggregation needs raw per-fold predictions")
        probs = np.concatenate([f.probs for f in evals])
        labels = np.concatenate([f.labels for f in evals])
        a = auroc(probs, labels)
        if a is None:
            raise MetricError("pooled predictions are single-class")
        return a
    raise MetricError(f"unknown aggregation mode {mode!r}")


def auspc(points, s_range) -> float:
    """Normalised area under a similarity-resolution curve.

    ``points`` are (s, value) with s strictly increasing; the trapezoidal
    integral over [s_lo, s_hi] is divided by the range width.  Endpoints
    falling between points are linearly interpolated; the range must be
    covered by the points.
    """
    s_lo, s_hi = float(s_range[0]), float(s_range[1])
    if len(points) < 2:
        raise MetricError("need at least 2 points")
    s = np.asarray([p[0] for p in points], dtype=np.float64)
    v = np.asarray([p[1] for p in points], dtype=np.float64)
    if not np.all(np.diff(s) > 0):
        raise MetricError("similarity thresholds must be strictly increasing")
    if s_lo >= s_hi:
        raise MetricError("empty integration range")
    if s_lo < s[0] or s_hi > s[-1]:
        raise MetricError(f"range [{s_lo}, {s_hi}] not covered by points")
    grid = np.unique(np.concatenate([s[(s >= s_lo) & (s <= s_hi)], [s_lo, s_hi]]))
    vals = np.interp(grid, s, v)
    return float(np.trapezoid(vals, grid) / (s_hi - s_lo))
