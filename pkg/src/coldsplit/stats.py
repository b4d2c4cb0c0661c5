"""Inference primitives: paired tests, correlation, multiplicity, clustered
bootstrap, and the ANOVA / effect-size family.

Effect sizes follow the Hays small-sample bias correction; the exact forms
used for each design are:

  one-way:   omega^2 = (SS_b - df_b * MS_w) / (SS_t + MS_w)
  two-way:   omega^2_term = (SS_term - df_term * MS_resid) / (SS_t + MS_resid)
  nested:    omega^2_group   = (SS_g - df_g * MS_sub)   / (SS_t + MS_sub)
             omega^2_sub|grp = (SS_s - df_s * MS_resid) / (SS_t + MS_resid)

where the nested design tests the group facet against the subgroup mean
square and the subgroup facet against the replicate residual.  Negative
omega^2 values are reported raw; they mean "indistinguishable from zero",
truncation is presentation-only.
"""

from __future__ import annotations

from dataclasses import dataclass
from statistics import NormalDist
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import f as f_dist

from ._util import average_ranks, substream
from .errors import StatsError

WILCOXON_EXACT_MAX_N = 25
_NORM = NormalDist()


# ---------------------------------------------------------------- wilcoxon


@dataclass
class WilcoxonResult:
    w: float
    p_two_sided: float
    n_effective: int
    method: str  # "exact" | "normal"


def wilcoxon_signed_rank(deltas) -> WilcoxonResult:
    """Paired signed-rank test.

    Zero deltas are dropped (Wilcoxon's original rule), tied |delta| ranks are
    averaged, W = min(W+, W-).  The null distribution is exact for
    n_effective <= 25 (dynamic program over the doubled rank multiset, valid
    under ties) and a tie-corrected normal approximation beyond.
    """
    d = np.asarray(deltas, dtype=np.float64)
    d = d[d != 0.0]
    n = int(d.size)
    if n == 0:
        raise StatsError("all deltas are zero")
    ranks = average_ranks(np.abs(d))
    w_pos = float(ranks[d > 0].sum())
    w_neg = float(ranks[d < 0].sum())
    w = min(w_pos, w_neg)
    if n <= WILCOXON_EXACT_MAX_N:
        p = _exact_two_sided(ranks, w)
        return WilcoxonResult(w, p, n, "exact")
    mu = n * (n + 1) / 4.0
    _, counts = np.unique(ranks, return_counts=True)
    tie_term = float(((counts**3 - counts)).sum()) / 48.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
    if var <= 0:
        raise StatsError("degenerate variance in normal approximation")
    z = (w - mu) / np.sqrt(var)
    p = min(1.0, 2.0 * _NORM.cdf(z))
    return WilcoxonResult(w, p, n, "normal")


def _exact_two_sided(ranks: np.ndarray, w: float) -> float:
    # Doubled ranks are integers even under tie averaging.
    doubled = np.rint(ranks * 2).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    counts /= counts.sum()
    w2 = int(np.floor(w * 2 + 1e-9))
    p = min(1.0, 2.0 * float(counts[: w2 + 1].sum()))
    return p


# ------------------------------------------------- spearman / holm


def spearman(x, y) -> Optional[float]:
    """Pearson correlation of tie-averaged ranks; None for constant input."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size != y.size or x.size < 3:
        raise StatsError("spearman needs equal-length vectors with n >= 3")
    if np.all(x == x[0]) or np.all(y == y[0]):
        return None
    rx, ry = average_ranks(x), average_ranks(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    return float((rx * ry).sum() / np.sqrt((rx**2).sum() * (ry**2).sum()))


@dataclass
class HolmResult:
    reject: list[bool]
    thresholds: list[float]  # alpha / (m - i + 1) aligned to original order


def holm(p_values: Sequence[float], alpha: float = 0.05) -> HolmResult:
    """Holm step-down multiplicity correction.

    Sorted ascending, p_(i) is compared against alpha/(m - i + 1); the first
    failure stops all later rejections.
    """
    m = len(p_values)
    if m == 0:
        raise StatsError("no p-values")
    order = sorted(range(m), key=lambda i: p_values[i])
    reject = [False] * m
    thresholds = [0.0] * m
    alive = True
    for step, i in enumerate(order):
        thr = alpha / (m - step)
        thresholds[i] = thr
        if alive and p_values[i] <= thr:
            reject[i] = True
        else:
            alive = False
    return HolmResult(reject, thresholds)


# ------------------------------------------------- clustered bootstrap


@dataclass
class BootstrapResult:
    point: float
    ci_lo: float
    ci_hi: float
    n_replicates: int
    n_skipped: int


def clustered_bootstrap(
    values: Sequence[tuple], B: int, statistic: Callable[[np.ndarray], float], seed: int
) -> BootstrapResult:
    """Percentile-CI bootstrap resampling whole clusters with replacement.

    ``values`` is a sequence of (cluster_id, value); all of a resampled
    cluster's values enter together.  Replicate r draws from an RNG keyed by
    (seed, r), so results are independent of worker count and scheduling.
    Replicates where the statistic is undefined (None/NaN) are skipped; more
    than 10 percent skipped is an error.
    """
    if B < 100:
        raise StatsError("B must be >= 100")
    clusters: dict = {}
    for cid, v in values:
        clusters.setdefault(cid, []).append(float(v))
    cluster_ids = sorted(clusters, key=str)
    if len(cluster_ids) < 2:
        raise StatsError("need at least 2 clusters")
    pools = [np.asarray(clusters[c]) for c in cluster_ids]
    point = statistic(np.concatenate(pools))
    reps = []
    skipped = 0
    k = len(pools)
    for r in range(B):
        rng = substream(seed, r)
        pick = rng.integers(0, k, size=k)
        stat = statistic(np.concatenate([pools[i] for i in pick]))
        if stat is None or (isinstance(stat, float) and np.isnan(stat)):
            skipped += 1
            continue
        reps.append(stat)
    if skipped > 0.10 * B:
        raise StatsError(f"{skipped}/{B} replicates undefined", n_skipped=skipped)
    lo, hi = np.percentile(reps, [2.5, 97.5])
    return BootstrapResult(float(point), float(lo), float(hi), B, skipped)


# ------------------------------------------------------------- ANOVA


@dataclass
class AnovaTerm:
    name: str
    ss: float
    df: int
    ms: float
    eta_sq: float
    omega_sq: float
    f: Optional[float] = None
    p: Optional[float] = None
    ci95: Optional[tuple] = None


@dataclass
class OnewayAnova:
    f: float
    df1: int
    df2: int
    p: float
    eta_sq: float
    omega_sq: float
    degenerate: bool = False


def oneway_anova(y, groups) -> OnewayAnova:
    y = np.asarray(y, dtype=np.float64)
    groups = np.asarray(groups)
    keys = sorted(set(groups.tolist()), key=str)
    if len(keys) < 2:
        raise StatsError("need at least 2 groups")
    n = y.size
    df1 = len(keys) - 1
    df2 = n - len(keys)
    if df2 < 1:
        raise StatsError("no residual degrees of freedom")
    grand = y.mean()
    ss_b = 0.0
    ss_w = 0.0
    for k in keys:
        yk = y[groups == k]
        if yk.size == 0:
            raise StatsError(f"empty group {k!r}")
        ss_b += yk.size * (yk.mean() - grand) ** 2
        ss_w += float(((yk - yk.mean()) ** 2).sum())
    ss_t = ss_b + ss_w
    if ss_w == 0.0 and ss_b == 0.0:
        return OnewayAnova(0.0, df1, df2, 1.0, 0.0, 0.0, degenerate=True)
    ms_b = ss_b / df1
    ms_w = ss_w / df2
    f_stat = ms_b / ms_w if ms_w > 0 else np.inf
    p = float(f_dist.sf(f_stat, df1, df2)) if np.isfinite(f_stat) else 0.0
    eta = ss_b / ss_t
    omega = (ss_b - df1 * ms_w) / (ss_t + ms_w)
    return OnewayAnova(float(f_stat), df1, df2, p, float(eta), float(omega))


def _dummies(levels: np.ndarray, keys: list) -> np.ndarray:
    # Drop-first treatment coding.
    cols = [np.asarray(levels == k, dtype=np.float64) for k in keys[1:]]
    return np.column_stack(cols) if cols else np.zeros((levels.size, 0))


def _rss(y: np.ndarray, X: np.ndarray) -> float:
    beta, _, _, _ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    return float(resid @ resid)


def twoway_typeII_anova(
    y, factor_a, factor_b, clusters=None, n_boot: int = 0, seed: int = 0
) -> list[AnovaTerm]:
    """Two-way Type-II ANOVA on a possibly unbalanced crossed design.

    Each main effect is adjusted for the other via model-comparison sums of
    squares on dummy-coded least-squares fits; the interaction enters last.
    Empty cells make the design rank-deficient and are reported by name.
    When ``clusters`` is given, 95 percent CIs for omega^2 are computed by
    cluster bootstrap, recomputing the full ANOVA per replicate.
    """
    y = np.asarray(y, dtype=np.float64)
    fa = np.asarray(factor_a)
    fb = np.asarray(factor_b)
    terms = _twoway_terms(y, fa, fb)
    if clusters is not None and n_boot > 0:
        clusters = np.asarray(clusters)
        ids = sorted(set(clusters.tolist()), key=str)
        idx_by = {c: np.flatnonzero(clusters == c) for c in ids}
        samples: dict[str, list[float]] = {t.name: [] for t in terms if t.name != "residual"}
        for r in range(n_boot):
            rng = substream(seed, r)
            pick = rng.integers(0, len(ids), size=len(ids))
            idx = np.concatenate([idx_by[ids[i]] for i in pick])
            try:
                reps = _twoway_terms(y[idx], fa[idx], fb[idx])
            except StatsError:
                continue
            for t in reps:
                if t.name in samples:
                    samples[t.name].append(t.omega_sq)
        for t in terms:
            if t.name in samples and len(samples[t.name]) >= 0.9 * n_boot:
                lo, hi = np.percentile(samples[t.name], [2.5, 97.5])
                t.ci95 = (float(lo), float(hi))
    return terms


def _twoway_terms(y, fa, fb) -> list[AnovaTerm]:
    ka = sorted(set(fa.tolist()), key=str)
    kb = sorted(set(fb.tolist()), key=str)
    if len(ka) < 2 or len(kb) < 2:
        raise StatsError("both factors need >= 2 levels")
    empty = [
        (a, b) for a in ka for b in kb if not np.any((fa == a) & (fb == b))
    ]
    if empty:
        raise StatsError(f"rank-deficient design; empty cells: {empty}", empty_cells=empty)
    n = y.size
    ones = np.ones((n, 1))
    A = _dummies(fa, ka)
    B = _dummies(fb, kb)
    AB = np.column_stack([A[:, i] * B[:, j] for i in range(A.shape[1]) for j in range(B.shape[1])])
    rss_a = _rss(y, np.column_stack([ones, A]))
    rss_b = _rss(y, np.column_stack([ones, B]))
    rss_ab = _rss(y, np.column_stack([ones, A, B]))
    rss_full = _rss(y, np.column_stack([ones, A, B, AB]))
    # Model-comparison SS; clamp float dust so ss >= 0 holds exactly.
    ss_a = max(rss_b - rss_ab, 0.0)
    ss_b_ = max(rss_a - rss_ab, 0.0)
    ss_int = max(rss_ab - rss_full, 0.0)
    ss_res = rss_full
    ss_tot = float(((y - y.mean()) ** 2).sum())
    df_a = len(ka) - 1
    df_b = len(kb) - 1
    df_int = df_a * df_b
    df_res = n - len(ka) * len(kb)
    if df_res < 1:
        raise StatsError("no residual degrees of freedom")
    ms_res = ss_res / df_res
    out = []
    for name, ss, df in (
        ("A", ss_a, df_a),
        ("B", ss_b_, df_b),
        ("A:B", ss_int, df_int),
    ):
        ms = ss / df
        f_stat = ms / ms_res if ms_res > 0 else np.inf
        p = float(f_dist.sf(f_stat, df, df_res)) if np.isfinite(f_stat) else 0.0
        out.append(
            AnovaTerm(
                name=name,
                ss=float(ss),
                df=df,
                ms=float(ms),
                eta_sq=float(ss / ss_tot) if ss_tot > 0 else 0.0,
                omega_sq=float((ss - df * ms_res) / (ss_tot + ms_res)) if ss_tot + ms_res > 0 else 0.0,
                f=float(f_stat),
                p=p,
            )
        )
    out.append(
        AnovaTerm(
            name="residual",
            ss=float(ss_res),
            df=df_res,
            ms=float(ms_res),
            eta_sq=float(ss_res / ss_tot) if ss_tot > 0 else 0.0,
            omega_sq=0.0,
        )
    )
    return out


@dataclass
class NestedAnova:
    terms: list[AnovaTerm]
    implied_subgroup_sd: float
    total_variance: float  # SS_total / (n - 1)


def nested_anova(y, group, subgroup) -> NestedAnova:
    """Hierarchical decomposition y ~ group / subgroup / replicate.

    Every subgroup id must nest under exactly one group.  The group facet is
    tested against the subgroup-within-group mean square and the subgroup
    facet against the replicate residual (the two denominator conventions in
    the module docstring).  The implied subgroup standard deviation
    sqrt(eta^2_subgroup * total variance) is reported alongside.
    """
    y = np.asarray(y, dtype=np.float64)
    group = np.asarray(group)
    subgroup = np.asarray(subgroup)
    owner: dict = {}
    for g, s in zip(group.tolist(), subgroup.tolist()):
        if s in owner and owner[s] != g:
            raise StatsError(f"subgroup {s!r} appears under multiple groups", subgroup=s)
        owner[s] = g
    gkeys = sorted(set(group.tolist()), key=str)
    skeys = sorted(set(subgroup.tolist()), key=str)
    if len(gkeys) < 2:
        raise StatsError("need >= 2 groups")
    n = y.size
    df_g = len(gkeys) - 1
    df_s = len(skeys) - len(gkeys)
    df_r = n - len(skeys)
    if df_s < 1:
        raise StatsError("subgroup term has zero degrees of freedom")
    if df_r < 1:
        raise StatsError("replicate residual has zero degrees of freedom")
    grand = y.mean()
    ss_g = 0.0
    ss_s = 0.0
    ss_r = 0.0
    for g in gkeys:
        yg = y[group == g]
        ss_g += yg.size * (yg.mean() - grand) ** 2
    for s in skeys:
        mask = subgroup == s
        ys = y[mask]
        gmean = y[group == owner[s]].mean()
        ss_s += ys.size * (ys.mean() - gmean) ** 2
        ss_r += float(((ys - ys.mean()) ** 2).sum())
    ss_t = ss_g + ss_s + ss_r
    ms_g = ss_g / df_g
    ms_s = ss_s / df_s
    ms_r = ss_r / df_r
    eta_g = ss_g / ss_t if ss_t > 0 else 0.0
    eta_s = ss_s / ss_t if ss_t > 0 else 0.0
    eta_r = ss_r / ss_t if ss_t > 0 else 0.0
    omega_g = (ss_g - df_g * ms_s) / (ss_t + ms_s) if ss_t + ms_s > 0 else 0.0
    omega_s = (ss_s - df_s * ms_r) / (ss_t + ms_r) if ss_t + ms_r > 0 else 0.0
    f_g = ms_g / ms_s if ms_s > 0 else np.inf
    f_s = ms_s / ms_r if ms_r > 0 else np.inf
    total_var = ss_t / (n - 1)
    terms = [
        AnovaTerm("group", float(ss_g), df_g, float(ms_g), float(eta_g), float(omega_g),
                  f=float(f_g), p=float(f_dist.sf(f_g, df_g, df_s)) if np.isfinite(f_g) else 0.0),
        AnovaTerm("subgroup|group", float(ss_s), df_s, float(ms_s), float(eta_s), float(omega_s),
                  f=float(f_s), p=float(f_dist.sf(f_s, df_s, df_r)) if np.isfinite(f_s) else 0.0),
        AnovaTerm("residual", float(ss_r), df_r, float(ms_r), float(eta_r), 0.0),
    ]
    implied = float(np.sqrt(max(eta_s, 0.0) * total_var))
    return NestedAnova(terms=terms, implied_subgroup_sd=implied, total_variance=float(total_var))
