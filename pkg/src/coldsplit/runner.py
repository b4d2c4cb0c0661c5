"""Parallel fold-by-seed evaluation with deterministic, worker-count-free
results.

Every (fold, seed) work item is pure: it derives its own RNG material from
its key, trains its own forest and returns predictions.  Results are
assembled in canonical (seed, fold) order, so aggregates are bit-identical
whether the pool runs 1 or 8 workers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ._util import stable_u64
from .dataset import BinarisationScheme, Cohort
from .errors import SingleClassError
from .metrics import FoldEval, FoldScore, auroc, score_fold
from .model import ForestConfig, predict_proba, train_forest
from .splits import FoldSet, LabelNoise, apply_label_noise

CANONICAL_SEEDS = (7, 13, 29, 42, 43, 44, 53, 71, 89, 97)


@dataclass
class FoldResult:
    seed: int
    fold_key: str
    test_idx: np.ndarray
    probs: Optional[np.ndarray]  # None when the fold could not be trained
    labels: np.ndarray
    score: Optional[FoldScore]
    trainable: bool
    noise_info: Optional[dict] = None

    @property
    def fold_eval(self) -> Optional[FoldEval]:
        if self.probs is None:
            return None
        return FoldEval(self.fold_key, self.probs, self.labels)


@dataclass
class EvalRun:
    foldset: FoldSet
    seeds: tuple
    results: list[FoldResult]  # canonical order: seeds outer, folds inner

    def by_seed(self, seed: int) -> list[FoldResult]:
        return [r for r in self.results if r.seed == seed]

    def macro_by_seed(self) -> dict[int, float]:
        out = {}
        for s in self.seeds:
            vals = [
                r.score.auroc
                for r in self.by_seed(s)
                if r.score is not None and r.score.auroc is not None
            ]
            if vals:
                out[s] = float(np.mean(vals))
        return out

    def per_target_auroc(self, cohort: Cohort, seed: int) -> dict[str, float]:
        """Per-target AUROC for one seed: scored within each fold's own model
        (never mixing score scales across models), then averaged over the
        folds where the target's block is non-degenerate.

        For single-target folds this is the mean of the target's fold AUROCs;
        for mixed folds (random k-fold) it is the mean of the target's
        within-fold sub-block AUROCs.
        """
        acc: dict[str, list] = {}
        for r in self.by_seed(seed):
            if r.probs is None:
                continue
            targets = np.asarray([cohort.target_ids[i] for i in r.test_idx], dtype=object)
            for tgt in sorted(set(targets.tolist()), key=str):
                mask = targets == tgt
                a = auroc(r.probs[mask], r.labels[mask])
                if a is not None:
                    acc.setdefault(tgt, []).append(a)
        return {tgt: float(np.mean(v)) for tgt, v in sorted(acc.items(), key=lambda kv: str(kv[0]))}


def _evaluate_one(
    X: np.ndarray,
    labels: np.ndarray,
    fold,
    config: ForestConfig,
    seed: int,
    cohort: Optional[Cohort],
    noise: Optional[LabelNoise],
    noise_seed: int,
    scheme: Optional[BinarisationScheme],
) -> FoldResult:
    train_labels = labels
    noise_info = None
    if noise is not None:
        train_labels, noise_info = apply_label_noise(
            labels, noise, cohort, seed=noise_seed, indices=fold.train, scheme=scheme
        )
    y_test = labels[fold.test]
    try:
        model = train_forest(X[fold.train], train_labels[fold.train], config.with_seed(seed))
    except SingleClassError:
        return FoldResult(seed, fold.fold_key, fold.test, None, y_test, None, False, noise_info)
    probs = predict_proba(model, X[fold.test])
    return FoldResult(
        seed,
        fold.fold_key,
        fold.test,
        probs,
        y_test,
        score_fold(fold.fold_key, probs, y_test),
        True,
        noise_info,
    )


def evaluate_foldset(
    X: np.ndarray,
    labels: np.ndarray,
    foldset: FoldSet,
    config: ForestConfig,
    seeds: Sequence[int] = CANONICAL_SEEDS,
    workers: int = 1,
    cohort: Optional[Cohort] = None,
    noise: Optional[LabelNoise] = None,
    noise_seed: int = 0,
    scheme: Optional[BinarisationScheme] = None,
) -> EvalRun:
    """Train/score every (fold, seed) pair of a protocol.

    Single-class training folds are reported untrained rather than scored.
    Optional training-label noise is applied per fold from a stream keyed by
    (noise_seed, seed, fold), keeping the run worker-count independent.
    """
    X = np.ascontiguousarray(np.asarray(X, dtype=np.uint8))
    labels = np.asarray(labels, dtype=bool)
    seeds = tuple(int(s) for s in seeds)
    items = [(s, f) for s in seeds for f in foldset.folds]

    def run(item):
        s, f = item
        per_item_noise_seed = ((noise_seed * 1_000_003 + s) ^ stable_u64(f.fold_key)) & 0x7FFFFFFF
        return _evaluate_one(X, labels, f, config, s, cohort, noise, per_item_noise_seed, scheme)

    if workers <= 1:
        results = [run(it) for it in items]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, items))
    return EvalRun(foldset=foldset, seeds=seeds, results=results)
