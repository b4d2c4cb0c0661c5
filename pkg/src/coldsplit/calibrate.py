"""Post-hoc probability calibration under the target-disjoint fold protocol.

Both calibration maps are strictly monotone in the input probability (slope
a > 0, temperature t > 0), so ranking metrics are exactly unchanged by
calibration; the per-fold pipeline asserts that equality.  Probability
outputs from the forest reach exact 0/1, so logits are taken on inputs
clipped to [eps, 1 - eps] with eps = 1e-6.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ._util import stable_u64, substream
from .dataset import Cohort
from .errors import CalibrationError, SingleClassError
from .metrics import auroc, brier, ece10
from .model import ForestConfig, predict_proba, train_forest
from .splits import FoldSet

LOGIT_EPS = 1e-6
MAX_ABS_SLOPE = 50.0
NEWTON_TOL = 1e-9
NEWTON_MAX_ITER = 100


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), LOGIT_EPS, 1.0 - LOGIT_EPS)
    return np.log(p / (1.0 - p))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class PlattParams:
    a: float  # slope on the logit scale
    b: float  # intercept
    converged: bool = True


@dataclass(frozen=True)
class TemperatureParam:
    t: float


def fit_platt(scores, labels) -> PlattParams:
    """Two-parameter logistic recalibration fit by Newton iteration.

    Plain logistic fit of the labels on clipped-logit scores (no Bayesian
    target smoothing by default; see ``fit_platt_smoothed``).  Separation is
    capped at |a| <= 50 and flagged instead of diverging.
    """
    return _fit_platt_impl(scores, np.asarray(labels, dtype=np.float64))


def fit_platt_smoothed(scores, labels) -> PlattParams:
    """Platt's original variant with smoothed targets
    (n_pos+1)/(n_pos+2), 1/(n_neg+2) instead of hard 0/1."""
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    t = np.where(labels, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))
    return _fit_platt_impl(scores, t)


def _fit_platt_impl(scores, targets: np.ndarray) -> PlattParams:
    z = _logit(scores)
    y = targets
    if y.size < 10:
        raise CalibrationError("need at least 10 calibration points")
    if float(y.min()) == float(y.max()):
        raise SingleClassError("calibration labels are single-class")
    a, b = 1.0, 0.0
    converged = False
    for _ in range(NEWTON_MAX_ITER):
        p = _sigmoid(a * z + b)
        w = np.maximum(p * (1.0 - p), 1e-12)
        g = np.array([((p - y) * z).sum(), (p - y).sum()])
        h = np.array(
            [
                [(w * z * z).sum(), (w * z).sum()],
                [(w * z).sum(), w.sum()],
            ]
        )
        try:
            step = np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            break
        a, b = a - step[0], b - step[1]
        if abs(a) > MAX_ABS_SLOPE:
            a = math.copysign(MAX_ABS_SLOPE, a)
        if float(np.abs(step).max()) < NEWTON_TOL:
            converged = True
            break
    if abs(a) >= MAX_ABS_SLOPE:
        converged = False
    return PlattParams(float(a), float(b), converged)


def apply_platt(params: PlattParams, scores) -> np.ndarray:
    return _sigmoid(params.a * _logit(scores) + params.b)


def fit_temperature(scores, labels) -> TemperatureParam:
    """One-parameter temperature fit: NLL minimised by golden-section search
    over t in [0.05, 20]."""
    z = _logit(scores)
    y = np.asarray(labels, dtype=np.float64)
    if y.size < 10:
        raise CalibrationError("need at least 10 calibration points")
    if float(y.min()) == float(y.max()):
        raise SingleClassError("calibration labels are single-class")

    def nll(t: float) -> float:
        p = np.clip(_sigmoid(z / t), 1e-12, 1.0 - 1e-12)
        return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum())

    lo, hi = 0.05, 20.0
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = hi - invphi * (hi - lo)
    d = lo + invphi * (hi - lo)
    fc, fd = nll(c), nll(d)
    while hi - lo > 1e-6:
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - invphi * (hi - lo)
            fc = nll(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + invphi * (hi - lo)
            fd = nll(d)
    return TemperatureParam(float((lo + hi) / 2.0))


def apply_temperature(param: TemperatureParam, scores) -> np.ndarray:
    return _sigmoid(_logit(scores) / param.t)


# ------------------------------------------- target-disjoint protocol


@dataclass
class CalibrationSplit:
    fold_key: str
    calibration_targets: list[str]
    fit_idx: np.ndarray  # rows used to fit the calibrator
    model_train_idx: np.ndarray  # rows used to train the model


def target_disjoint_calibration(
    foldset: FoldSet, cohort: Cohort, frac: float = 0.2, seed: int = 0
) -> list[CalibrationSplit]:
    """Carve a target-disjoint calibration block out of each fold's training
    partition.

    20 percent of non-test targets (by target count, rounded up, seeded
    shuffle) become the calibration block; the model trains on the remaining
    targets and the calibrator is fit on the block's predictions, so
    calibration never touches test labels or training targets.
    """
    if not (0.0 < frac < 1.0):
        raise CalibrationError("frac must be in (0, 1)")
    out = []
    for fold in foldset.folds:
        targets = sorted({cohort.target_ids[i] for i in fold.train})
        if len(targets) < 5:
            raise CalibrationError(f"fold {fold.fold_key}: fewer than 5 non-test targets")
        rng = substream(seed, "calibration", stable_u64(fold.fold_key))
        perm = rng.permutation(len(targets))
        n_cal = int(math.ceil(frac * len(targets)))
        cal_targets = sorted(targets[i] for i in perm[:n_cal])
        cal_set = set(cal_targets)
        mask = np.asarray([cohort.target_ids[i] in cal_set for i in fold.train])
        out.append(
            CalibrationSplit(
                fold_key=fold.fold_key,
                calibration_targets=cal_targets,
                fit_idx=fold.train[mask],
                model_train_idx=fold.train[~mask],
            )
        )
    return out


@dataclass
class CalibrationRow:
    fold_key: str
    seed: int
    n_test: int
    ece_raw: float
    ece_platt: Optional[float]
    ece_temp: Optional[float]
    brier_raw: float
    brier_platt: Optional[float]
    a: Optional[float]
    b: Optional[float]
    t: Optional[float]
    auroc_raw: Optional[float]
    auroc_platt: Optional[float]
    flags: str  # "", "single_class_calibration", "platt_capped", ...


def run_calibration(
    X: np.ndarray,
    labels: np.ndarray,
    foldset: FoldSet,
    cohort: Cohort,
    config: ForestConfig,
    seeds: Sequence[int],
    frac: float = 0.2,
    split_seed: int = 0,
    workers: int = 1,
) -> list[CalibrationRow]:
    """Per-fold calibration pipeline under the target-disjoint protocol.

    Folds whose calibration block is single-class pass raw probabilities
    through with a flag.  Monotone calibration leaves AUROC exactly unchanged;
    the row records both values so reports can assert the equality.
    """
    from concurrent.futures import ThreadPoolExecutor

    X = np.ascontiguousarray(np.asarray(X, dtype=np.uint8))
    labels = np.asarray(labels, dtype=bool)
    csplits = target_disjoint_calibration(foldset, cohort, frac=frac, seed=split_seed)
    items = [(int(s), fold, cs) for s in seeds for fold, cs in zip(foldset.folds, csplits)]

    def run(item):
        seed, fold, cs = item
        flags = []
        y_test = labels[fold.test]
        try:
            model = train_forest(X[cs.model_train_idx], labels[cs.model_train_idx], config.with_seed(seed))
        except SingleClassError:
            return None
        raw = predict_proba(model, X[fold.test])
        cal_probs = predict_proba(model, X[cs.fit_idx])
        cal_y = labels[cs.fit_idx]
        platt = temp = None
        p_platt = p_temp = None
        if cal_y.all() or not cal_y.any():
            flags.append("single_class_calibration")
        else:
            platt = fit_platt(cal_probs, cal_y)
            if not platt.converged:
                flags.append("platt_capped")
            temp = fit_temperature(cal_probs, cal_y)
            p_platt = apply_platt(platt, raw)
            p_temp = apply_temperature(temp, raw)
        a_raw = auroc(raw, y_test)
        return CalibrationRow(
            fold_key=fold.fold_key,
            seed=seed,
            n_test=int(y_test.size),
            ece_raw=ece10(raw, y_test),
            ece_platt=None if p_platt is None else ece10(p_platt, y_test),
            ece_temp=None if p_temp is None else ece10(p_temp, y_test),
            brier_raw=brier(raw, y_test),
            brier_platt=None if p_platt is None else brier(p_platt, y_test),
            a=None if platt is None else platt.a,
            b=None if platt is None else platt.b,
            t=None if temp is None else temp.t,
            auroc_raw=a_raw,
            auroc_platt=None if p_platt is None else auroc(p_platt, y_test),
            flags=";".join(flags),
        )

    if workers <= 1:
        rows = [run(it) for it in items]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, items))
    return [r for r in rows if r is not None]
