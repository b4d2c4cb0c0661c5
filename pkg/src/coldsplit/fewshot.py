"""Per-target few-shot recalibration: support selection, retraining, curves.

Support selection (STRATIFIED_QUINTILE) works as follows.  Test records are
sorted by base predicted probability (ties by stable input order) and split
into 5 equal-count quintiles (earlier quintiles take the remainder).  Picks
are allocated round-robin over quintiles starting from the lowest; each
quintile keeps its own label-alternation state starting at positive.  On a
visit the wanted class is searched in the visited quintile first, then in the
following quintiles in cyclic order (the waterfall); if the class is
exhausted everywhere any remaining record is taken.  Within the chosen
quintile the pick is uniform under the plan's seed.  The visited quintile's
alternation state flips after every successful pick.

To prevent same-compound train/test contamination, every record sharing a
compound with a support record leaves the query set as well; those sibling
records belong to neither side and are counted on the plan.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._util import stable_u64, substream
from .dataset import Cohort
from .errors import SingleClassError, SplitError
from .metrics import auroc
from .model import ForestConfig, predict_proba, train_forest
from .splits import Fold, FoldSet

STRATIFIED_QUINTILE = "STRATIFIED_QUINTILE"
RANDOM = "RANDOM"


@dataclass
class FewShotPlan:
    target_id: str
    k: int
    selection: str
    support: np.ndarray  # record indices joining the training set
    query: np.ndarray  # evaluation records: test minus support minus siblings
    excluded_siblings: np.ndarray  # same-compound records removed from query
    support_short: bool = False  # pool exhausted before k picks
    degenerate_query: bool = False  # query went single-class


def plan_fewshot(
    fold: Fold,
    base_probs: np.ndarray,
    k: int,
    selection: str,
    seed: int,
    cohort: Cohort,
) -> FewShotPlan:
    """Select k support records from a fold's test block.

    ``base_probs`` is aligned to ``fold.test``.  k = 0 yields the identity
    plan (empty support, full test as query); k >= |test| leaves no query and
    is an error.
    """
    test = fold.test
    if base_probs is not None and len(base_probs) != len(test):
        raise SplitError("base_probs must align with the fold's test records")
    if k < 0:
        raise SplitError("k must be >= 0")
    if k >= len(test):
        raise SplitError(f"k={k} leaves no query records (test size {len(test)})")
    labels = cohort.labels
    if k == 0:
        picked: list[int] = []
    elif selection == RANDOM:
        rng = substream(seed, "fewshot_random", stable_u64(fold.fold_key), k)
        picked = [int(test[i]) for i in rng.choice(len(test), size=k, replace=False)]
    elif selection == STRATIFIED_QUINTILE:
        if base_probs is None:
            raise SplitError("stratified selection needs base probabilities")
        picked = _stratified_picks(test, np.asarray(base_probs, float), k, labels, seed, fold.fold_key)
    else:
        raise SplitError(f"unknown selection {selection!r}")
    picked_arr = np.asarray(sorted(picked), dtype=np.int64)
    support_compounds = {cohort.compound_ids[i] for i in picked_arr}
    in_support = np.isin(test, picked_arr)
    sibling_mask = np.asarray(
        [cohort.compound_ids[i] in support_compounds for i in test]
    ) & ~in_support
    query = test[~in_support & ~sibling_mask]
    qlabels = labels[query]
    target = cohort.target_ids[test[0]] if len(set(cohort.target_ids[test])) == 1 else "*"
    return FewShotPlan(
        target_id=target,
        k=k,
        selection=selection,
        support=picked_arr,
        query=query,
        excluded_siblings=test[sibling_mask],
        support_short=len(picked_arr) < k,
        degenerate_query=bool(qlabels.size == 0 or qlabels.all() or not qlabels.any()),
    )


def _stratified_picks(test, probs, k, labels, seed, fold_key) -> list[int]:
    rng = substream(seed, "fewshot_quintile", stable_u64(fold_key), k)
    order = np.lexsort((np.arange(len(test)), probs))  # ascending, stable
    quintiles = [list(block) for block in np.array_split(order, 5)]
    remaining = [set(q) for q in quintiles]
    want_positive = [True] * 5
    picked: list[int] = []
    visit = 0
    while len(picked) < k and any(remaining):
        q = visit % 5
        visit += 1
        want = want_positive[q]
        pos = None
        for step in range(5):  # waterfall: look in q, then following quintiles
            cand = [i for i in sorted(remaining[(q + step) % 5]) if labels[test[i]] == want]
            if cand:
                pos = cand[int(rng.integers(0, len(cand)))]
                break
        if pos is None:  # wanted class exhausted everywhere: take anything left
            for step in range(5):
                cand = sorted(remaining[(q + step) % 5])
                if cand:
                    pos = cand[int(rng.integers(0, len(cand)))]
                    break
        if pos is None:
            break
        for r in remaining:
            r.discard(pos)
        picked.append(int(test[pos]))
        want_positive[q] = not want
    return picked


@dataclass
class FewShotRow:
    seed: int
    fold_key: str
    k: int
    selection: str
    n_support: int
    n_query: int
    n_siblings_excluded: int
    auroc_fewshot: Optional[float]
    auroc_base_on_query: Optional[float]
    degenerate: bool


@dataclass
class FewShotCurvePoint:
    k: int
    selection: str
    macro_mean: float
    macro_sd: float
    n_folds_degenerate: int
    base_on_query_macro: Optional[float]


@dataclass
class FewShotResult:
    rows: list[FewShotRow]
    curve: list[FewShotCurvePoint]
    baseline_full_test: dict  # seed -> macro AUROC on untouched test folds


def evaluate_fewshot(
    X: np.ndarray,
    labels: np.ndarray,
    foldset: FoldSet,
    cohort: Cohort,
    config: ForestConfig,
    k_list: Sequence[int],
    selection: str,
    seeds: Sequence[int],
    workers: int = 1,
) -> FewShotResult:
    """Learning-curve evaluation: retrain per (fold, k, seed) on train+support
    and score the query records.

    The k = 0 baseline is evaluated twice: on each k's query set (for paired
    comparison at that k, reported per row) and on the full untouched test
    folds (the headline view, reported separately), because support exclusion
    shrinks the test distribution.
    """
    from concurrent.futures import ThreadPoolExecutor

    X = np.ascontiguousarray(np.asarray(X, dtype=np.uint8))
    labels = np.asarray(labels, dtype=bool)
    k_list = sorted(int(k) for k in k_list)
    seeds = tuple(int(s) for s in seeds)

    def run_fold(item):
        seed, fold = item
        out_rows: list[FewShotRow] = []
        try:
            base = train_forest(X[fold.train], labels[fold.train], config.with_seed(seed))
        except SingleClassError:
            return out_rows, None
        base_test_probs = predict_proba(base, X[fold.test])
        full_auroc = auroc(base_test_probs, labels[fold.test])
        prob_of = {int(t): base_test_probs[i] for i, t in enumerate(fold.test)}
        for k in k_list:
            plan = plan_fewshot(fold, base_test_probs, k, selection, seed, cohort)
            if k == 0:
                a = auroc(base_test_probs, labels[fold.test])
                out_rows.append(
                    FewShotRow(seed, fold.fold_key, 0, selection, 0, len(plan.query), 0, a, a, a is None)
                )
                continue
            qprobs_base = np.asarray([prob_of[int(i)] for i in plan.query])
            qlabels = labels[plan.query]
            base_on_query = auroc(qprobs_base, qlabels)
            train_idx = np.concatenate([fold.train, plan.support])
            try:
                model = train_forest(X[train_idx], labels[train_idx], config.with_seed(seed))
                fs_probs = predict_proba(model, X[plan.query])
                fs_auroc = auroc(fs_probs, qlabels)
            except SingleClassError:
                fs_auroc = None
            out_rows.append(
                FewShotRow(
                    seed,
                    fold.fold_key,
                    k,
                    selection,
                    len(plan.support),
                    len(plan.query),
                    len(plan.excluded_siblings),
                    fs_auroc,
                    base_on_query,
                    fs_auroc is None or plan.degenerate_query,
                )
            )
        return out_rows, (seed, full_auroc)

    items = [(s, f) for s in seeds for f in foldset.folds]
    if workers <= 1:
        outs = [run_fold(it) for it in items]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(run_fold, items))

    rows: list[FewShotRow] = []
    full_by_seed: dict[int, list[float]] = {}
    for out_rows, full in outs:
        rows.extend(out_rows)
        if full is not None and full[1] is not None:
            full_by_seed.setdefault(full[0], []).append(full[1])
    baseline_full = {s: float(np.mean(v)) for s, v in sorted(full_by_seed.items())}

    curve: list[FewShotCurvePoint] = []
    for k in k_list:
        per_seed = []
        per_seed_base = []
        n_degen = 0
        for s in seeds:
            vals = [r.auroc_fewshot for r in rows if r.seed == s and r.k == k and r.auroc_fewshot is not None]
            bvals = [
                r.auroc_base_on_query
                for r in rows
                if r.seed == s and r.k == k and r.auroc_base_on_query is not None
            ]
            n_degen += sum(1 for r in rows if r.seed == s and r.k == k and r.degenerate)
            if vals:
                per_seed.append(float(np.mean(vals)))
            if bvals:
                per_seed_base.append(float(np.mean(bvals)))
        curve.append(
            FewShotCurvePoint(
                k=k,
                selection=selection,
                macro_mean=float(np.mean(per_seed)) if per_seed else float("nan"),
                macro_sd=float(np.std(per_seed, ddof=1)) if len(per_seed) > 1 else 0.0,
                n_folds_degenerate=n_degen,
                base_on_query_macro=float(np.mean(per_seed_base)) if per_seed_base else None,
            )
        )
    return FewShotResult(rows=rows, curve=curve, baseline_full_test=baseline_full)
