"""Headline decomposition pipelines: cross-lab cascade, noise calibration,
selection-bias audit, trial variance shares, factorial marginals, power grids,
similarity-resolution sweeps.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import t as t_dist

from .dataset import Cohort, eligible_targets
from .errors import PipelineError, StatsError
from .metrics import auspc
from .model import ForestConfig
from .runner import EvalRun, evaluate_foldset
from .splits import FoldSet, crosslab_folds, loto_folds, random_kfold, spectra_filter
from .stats import clustered_bootstrap, oneway_anova, spearman

_NORM = NormalDist()


# ------------------------------------------------------------- cascade


@dataclass
class CascadeResult:
    rcv_macro: float
    crosslab_macro: float
    loto_macro: float
    interlab_bound: float  # rcv_macro - crosslab_macro
    paired_n: int
    ci95: Optional[tuple]
    per_target: list  # rows (target, rcv, crosslab, loto)

    @classmethod
    def from_macros(
        cls, rcv: float, crosslab: float, loto: float, paired_n: int = 0, ci95=None
    ) -> "CascadeResult":
        return cls(rcv, crosslab, loto, rcv - crosslab, paired_n, ci95, [])


def run_cascade(
    X: np.ndarray,
    cohort: Cohort,
    config: ForestConfig,
    seeds: Sequence[int],
    k_random: int = 5,
    workers: int = 1,
    n_boot: int = 5000,
    boot_seed: int = 0,
) -> CascadeResult:
    """Within-target cross-lab cascade on the cross-lab-eligible subcohort.

    Random CV (restricted to the subcohort's records), the cross-lab holdout
    and the left-out-target protocol are evaluated on the same records; each
    is aggregated as a macro mean over per-target AUROC (averaged over seeds)
    so the three levels pair by target.  The inter-laboratory bound is
    rcv_macro - crosslab_macro with a target-clustered bootstrap CI over the
    per-target paired differences.
    """
    targets = eligible_targets(cohort, "CROSSLAB")
    if len(targets) < 2:
        raise PipelineError("need at least 2 cross-lab-eligible targets")
    keep = np.concatenate([cohort.by_target[t] for t in sorted(targets)])
    keep.sort()
    sub = Cohort([cohort.records[i] for i in keep])
    Xs = np.asarray(X, dtype=np.uint8)[keep]
    labels = sub.labels

    per_target: dict[str, dict[str, list[float]]] = {t: {} for t in targets}

    def collect(run: EvalRun, name: str, by_fold_target: bool):
        for s in run.seeds:
            if by_fold_target:
                # single-target folds: mean over the target's fold AUROCs
                acc: dict[str, list[float]] = {}
                for r in run.by_seed(s):
                    if r.score is None or r.score.auroc is None:
                        continue
                    tgt = r.fold_key.split("|")[0]
                    acc.setdefault(tgt, []).append(r.score.auroc)
                vals = {t: float(np.mean(v)) for t, v in acc.items()}
            else:
                vals = run.per_target_auroc(sub, s)
            for t, v in vals.items():
                per_target[t].setdefault(name, []).append(v)

    for s in seeds:
        collect(
            evaluate_foldset(Xs, labels, random_kfold(sub, k_random, int(s)), config, [s], workers),
            "rcv",
            by_fold_target=False,
        )
    cl = crosslab_folds(sub)
    collect(evaluate_foldset(Xs, labels, cl, config, seeds, workers), "crosslab", True)
    lo = loto_folds(sub)
    collect(evaluate_foldset(Xs, labels, lo, config, seeds, workers), "loto", True)

    rows = []
    for t in sorted(targets):
        vals = per_target[t]
        if all(name in vals for name in ("rcv", "crosslab", "loto")):
            rows.append(
                (
                    t,
                    float(np.mean(vals["rcv"])),
                    float(np.mean(vals["crosslab"])),
                    float(np.mean(vals["loto"])),
                )
            )
    if len(rows) < 2:
        raise PipelineError("fewer than 2 targets with all cascade levels evaluable")
    rcv_macro = float(np.mean([r[1] for r in rows]))
    crosslab_macro = float(np.mean([r[2] for r in rows]))
    loto_macro = float(np.mean([r[3] for r in rows]))
    deltas = [(r[0], r[1] - r[2]) for r in rows]
    try:
        boot = clustered_bootstrap(deltas, max(n_boot, 100), lambda v: float(np.mean(v)), boot_seed)
        ci = (boot.ci_lo, boot.ci_hi)
    except StatsError:
        ci = None
    return CascadeResult(
        rcv_macro=rcv_macro,
        crosslab_macro=crosslab_macro,
        loto_macro=loto_macro,
        interlab_bound=rcv_macro - crosslab_macro,
        paired_n=len(rows),
        ci95=ci,
        per_target=rows,
    )


# ----------------------------------------------------- noise calibration


@dataclass
class NoiseCurve:
    points: list  # (level, auroc_mean, auroc_sd, n_seeds), levels strictly increasing
    slope: Optional[float] = None
    intercept: Optional[float] = None
    residual_se: Optional[float] = None

    def fit(self) -> "NoiseCurve":
        """Unweighted least squares through the point means."""
        if len(self.points) < 3:
            raise PipelineError("need at least 3 noise levels")
        x = np.asarray([p[0] for p in self.points], dtype=np.float64)
        if not np.all(np.diff(x) > 0):
            raise PipelineError("noise levels must be strictly increasing")
        y = np.asarray([p[1] for p in self.points], dtype=np.float64)
        slope, intercept = np.polyfit(x, y, 1)
        resid = y - (slope * x + intercept)
        dof = len(x) - 2
        self.slope = float(slope)
        self.intercept = float(intercept)
        self.residual_se = float(np.sqrt((resid**2).sum() / dof)) if dof > 0 else 0.0
        return self


@dataclass
class NoiseProjection:
    flip_equivalent: float  # level units of the curve
    pi_half_width: float  # central 80 percent prediction interval at the projection
    slope: float
    intercept: float
    residual_se: float


def noise_calibration(curve: NoiseCurve, bound: float) -> NoiseProjection:
    """Project a performance bound onto a noise-degradation line.

    The projection is bound / |slope|; its uncertainty is the standard
    prediction-interval half-width at that abscissa,
    t(0.90, n-2) * s * sqrt(1 + 1/n + (x* - xbar)^2 / Sxx).
    """
    if bound <= 0:
        raise PipelineError("bound must be positive")
    if curve.slope is None:
        curve = curve.fit()
    if curve.slope >= 0:
        raise PipelineError(f"noise curve slope {curve.slope} is not negative")
    projection = bound / abs(curve.slope)
    x = np.asarray([p[0] for p in curve.points], dtype=np.float64)
    n = len(x)
    sxx = float(((x - x.mean()) ** 2).sum())
    tq = float(t_dist.ppf(0.90, n - 2))
    half = tq * curve.residual_se * math.sqrt(1.0 + 1.0 / n + (projection - x.mean()) ** 2 / sxx)
    return NoiseProjection(
        flip_equivalent=float(projection),
        pi_half_width=float(half),
        slope=curve.slope,
        intercept=curve.intercept,
        residual_se=curve.residual_se,
    )


def run_noise_curve(
    X: np.ndarray,
    labels: np.ndarray,
    foldset: FoldSet,
    cohort: Cohort,
    config: ForestConfig,
    noise_kind: str,
    levels: Sequence[float],
    seeds: Sequence[int],
    scheme,
    workers: int = 1,
    noise_seed: int = 0,
) -> NoiseCurve:
    """Macro-AUROC degradation curve under training-label noise."""
    from .splits import LabelNoise

    points = []
    for level in sorted(levels):
        run = evaluate_foldset(
            X,
            labels,
            foldset,
            config,
            seeds,
            workers,
            cohort=cohort,
            noise=LabelNoise(noise_kind, float(level)) if level > 0 else None,
            noise_seed=noise_seed,
            scheme=scheme,
        )
        macros = list(run.macro_by_seed().values())
        if not macros:
            raise PipelineError(f"no evaluable folds at noise level {level}")
        sd = float(np.std(macros, ddof=1)) if len(macros) > 1 else 0.0
        points.append((float(level), float(np.mean(macros)), sd, len(macros)))
    return NoiseCurve(points=points).fit()


# ------------------------------------------------- selection-bias audit


def expected_max(N: int, sigma: float) -> float:
    """Closed-form expected-maximum bound sqrt(2 ln N) * sigma (natural log)."""
    if N < 2:
        raise PipelineError("N must be >= 2")
    if sigma < 0:
        raise PipelineError("sigma must be >= 0")
    return math.sqrt(2.0 * math.log(N)) * sigma


@dataclass
class TrialRow:
    trial_id: str
    phase: str  # "random" | "guided"
    hps: dict
    objective: float
    seed: int


@dataclass
class TrialTable:
    rows: list[TrialRow]
    dimensions: list[str]

    def __post_init__(self):
        for r in self.rows:
            if not math.isfinite(r.objective):
                raise PipelineError(f"trial {r.trial_id}: non-finite objective")
            missing = [d for d in self.dimensions if d not in r.hps]
            if missing:
                raise PipelineError(f"trial {r.trial_id}: missing dimensions {missing}")


@dataclass
class TrialAuditReport:
    ranks: list  # (rank, trial_id, objective, validated_mean, validated_sd, regression)
    spearman_top_k: Optional[float]
    spearman_2_to_k: Optional[float]
    dimension_shares: list  # (dimension, omega_sq) on random-phase trials
    observed_max: float
    candidate_sigma: float
    candidate_mean: float
    expected_max_value: float
    observed_excess: float  # observed_max - candidate_mean
    n_trials: int


def audit_trials(
    table: TrialTable,
    top_k: int,
    revalidated: dict[str, tuple],
    candidate_threshold: float = 0.55,
) -> TrialAuditReport:
    """Selection-bias audit of a hyperparameter-search trial table.

    Per-rank regression (single-evaluation objective minus multi-seed
    validated mean), rank correlations over the top k and over ranks 2..k,
    per-dimension variance shares via one-way omega^2 on the random-phase
    trials (an approximation to a functional decomposition, labelled as
    such), and the observed maximum against the closed-form expected-maximum
    bound at the random-phase candidate sigma (candidates: random-phase
    trials above ``candidate_threshold``).
    """
    if not table.rows:
        raise PipelineError("empty trial table")
    ordered = sorted(table.rows, key=lambda r: (-r.objective, r.trial_id))
    top = ordered[: int(top_k)]
    missing = [r.trial_id for r in top if r.trial_id not in revalidated]
    if missing:
        raise PipelineError(f"revalidation missing for top-{top_k} trials: {missing}", missing=missing)
    ranks = []
    for i, r in enumerate(top, start=1):
        mean, sd = revalidated[r.trial_id]
        ranks.append((i, r.trial_id, r.objective, float(mean), float(sd), r.objective - float(mean)))
    objs = [r.objective for r in top]
    vals = [revalidated[r.trial_id][0] for r in top]
    sp_all = spearman(objs, vals) if len(top) >= 3 else None
    sp_tail = spearman(objs[1:], vals[1:]) if len(top) >= 4 else None

    random_rows = [r for r in table.rows if r.phase == "random"]
    shares = []
    for dim in table.dimensions:
        y = np.asarray([r.objective for r in random_rows], dtype=np.float64)
        groups = np.asarray([str(r.hps[dim]) for r in random_rows], dtype=object)
        if len(set(groups.tolist())) < 2 or y.size < 3:
            shares.append((dim, 0.0))
            continue
        try:
            res = oneway_anova(y, groups)
            shares.append((dim, res.omega_sq))
        except StatsError:
            shares.append((dim, 0.0))
    shares.sort(key=lambda kv: -kv[1])

    cand = np.asarray(
        [r.objective for r in random_rows if r.objective > candidate_threshold], dtype=np.float64
    )
    cand_sigma = float(np.std(cand, ddof=1)) if cand.size >= 2 else 0.0
    cand_mean = float(cand.mean()) if cand.size else float("nan")
    observed_max = float(ordered[0].objective)
    exp = expected_max(max(len(table.rows), 2), cand_sigma)
    return TrialAuditReport(
        ranks=ranks,
        spearman_top_k=sp_all,
        spearman_2_to_k=sp_tail,
        dimension_shares=shares,
        observed_max=observed_max,
        candidate_sigma=cand_sigma,
        candidate_mean=cand_mean,
        expected_max_value=exp,
        observed_excess=observed_max - cand_mean if cand.size else float("nan"),
        n_trials=len(table.rows),
    )


def load_trial_table(trials_path, dimensions: list[str]) -> TrialTable:
    """Trial CSV: trial_id, phase, objective, seed, plus one column per
    dimension named in the manifest."""
    rows = []
    with open(trials_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for raw in reader:
            rows.append(
                TrialRow(
                    trial_id=raw["trial_id"],
                    phase=raw["phase"],
                    hps={d: raw[d] for d in dimensions},
                    objective=float(raw["objective"]),
                    seed=int(raw.get("seed", 0) or 0),
                )
            )
    return TrialTable(rows=rows, dimensions=list(dimensions))


# ------------------------------------------------- factorial marginals


@dataclass
class FactorialCell:
    mean: float
    sd: Optional[float] = None
    per_target: Optional[dict] = None  # target -> value


@dataclass
class MarginalResult:
    factor: str
    estimate: float
    ci95: Optional[tuple]
    pairs: list  # (cell_on, cell_off, difference)


def factorial_marginals(
    cells: dict[str, FactorialCell],
    factors: Sequence[str] = ("M", "W", "A", "K"),
    anchor: str = "M",
    n_boot: int = 5000,
    seed: int = 0,
) -> dict[str, MarginalResult]:
    """Anchored marginal contribution of each factor in a 2^4 design.

    Cells are keyed by bit strings aligned with ``factors``.  With the anchor
    factor held at 1, the marginal of factor F is the mean over the four
    (F=1 minus F=0) paired differences across the remaining two factors'
    combinations; the two degenerate no-anchor cells are never consulted.
    Adding a constant to every cell leaves marginals unchanged; scaling every
    cell scales them linearly.  When per-target values are supplied for every
    involved cell, a 95 percent CI is attached by target-clustered bootstrap.
    """
    factors = list(factors)
    if anchor not in factors:
        raise PipelineError(f"anchor {anchor!r} not among factors {factors}")
    ai = factors.index(anchor)
    out: dict[str, MarginalResult] = {}
    for fi, f in enumerate(factors):
        if f == anchor:
            continue
        others = [i for i in range(len(factors)) if i not in (ai, fi)]
        pairs = []
        per_target_diffs: Optional[dict] = {}
        for combo in itertools.product("01", repeat=len(others)):
            on = ["0"] * len(factors)
            on[ai] = "1"
            off = list(on)
            on[fi], off[fi] = "1", "0"
            for oi, bit in zip(others, combo):
                on[oi] = off[oi] = bit
            key_on, key_off = "".join(on), "".join(off)
            missing = [k for k in (key_on, key_off) if k not in cells]
            if missing:
                raise PipelineError(
                    f"factor {f}: missing cells {missing}", missing_cells=missing
                )
            c_on, c_off = cells[key_on], cells[key_off]
            pairs.append((key_on, key_off, c_on.mean - c_off.mean))
            if (
                per_target_diffs is not None
                and c_on.per_target
                and c_off.per_target
                and set(c_on.per_target) == set(c_off.per_target)
            ):
                for tgt in c_on.per_target:
                    per_target_diffs.setdefault(tgt, []).append(
                        c_on.per_target[tgt] - c_off.per_target[tgt]
                    )
            else:
                per_target_diffs = None
        estimate = float(np.mean([p[2] for p in pairs]))
        ci = None
        if per_target_diffs:
            values = [(tgt, float(np.mean(d))) for tgt, d in sorted(per_target_diffs.items())]
            if len(values) >= 2:
                boot = clustered_bootstrap(
                    values, max(n_boot, 100), lambda v: float(np.mean(v)), seed
                )
                ci = (boot.ci_lo, boot.ci_hi)
        out[f] = MarginalResult(factor=f, estimate=estimate, ci95=ci, pairs=pairs)
    return out


# ------------------------------------------------------- power grid


@dataclass
class PowerRow:
    rho: float
    vif: float
    n_eff: float
    mde: float


def power_grid(
    n_targets: int,
    n_seeds: int,
    n_pairs: int,
    rho_list: Sequence[float],
    sigma_d: float,
    alpha: float = 0.05,
    power: float = 0.80,
) -> list[PowerRow]:
    """Clustered-design power grid.

    m = seeds * pairs observations per target; VIF = 1 + (m-1) * rho;
    n_eff = n_targets * m / VIF; the minimum detectable effect uses the
    two-sided normal approximation (z_{1-alpha/2} + z_{power}) * sigma_d /
    sqrt(n_eff).
    """
    if sigma_d <= 0:
        raise PipelineError("sigma_d must be positive")
    m = n_seeds * n_pairs
    z = _NORM.inv_cdf(1.0 - alpha / 2.0) + _NORM.inv_cdf(power)
    rows = []
    for rho in rho_list:
        if not (0.0 <= rho < 1.0):
            raise PipelineError(f"rho={rho} outside [0, 1)")
        vif = 1.0 + (m - 1) * rho
        n_eff = n_targets * m / vif
        rows.append(PowerRow(float(rho), float(vif), float(n_eff), float(z * sigma_d / math.sqrt(n_eff))))
    return rows


# ------------------------------------------------- similarity sweep


@dataclass
class SpectraPoint:
    s: float
    macro_mean: float
    macro_sd: float
    n_folds: int
    n_dropped: int


@dataclass
class SpectraSweep:
    points: list[SpectraPoint]
    auspc_value: Optional[float]
    dropped: dict


def spectra_sweep(
    X: np.ndarray,
    labels: np.ndarray,
    base: FoldSet,
    fingerprints: np.ndarray,
    config: ForestConfig,
    thresholds: Sequence[float],
    seeds: Sequence[int],
    workers: int = 1,
) -> SpectraSweep:
    """Evaluate a base protocol under decreasing train-test similarity
    ceilings; the normalised area under the resulting curve summarises it."""
    from .errors import SpectraError

    points = []
    dropped: dict = {}
    for s in sorted(thresholds):
        try:
            filtered = spectra_filter(base, float(s), fingerprints, labels=labels)
        except SpectraError as err:
            dropped[float(s)] = err.report
            continue
        dropped[float(s)] = filtered.params.get("dropped", [])
        run = evaluate_foldset(X, labels, filtered, config, seeds, workers)
        macros = list(run.macro_by_seed().values())
        if not macros:
            continue
        sd = float(np.std(macros, ddof=1)) if len(macros) > 1 else 0.0
        points.append(
            SpectraPoint(float(s), float(np.mean(macros)), sd, len(filtered.folds), len(dropped[float(s)]))
        )
    value = None
    if len(points) >= 2:
        value = auspc([(p.s, p.macro_mean) for p in points], (points[0].s, points[-1].s))
    return SpectraSweep(points=points, auspc_value=value, dropped=dropped)
