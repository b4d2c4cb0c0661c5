"""Evaluation protocols as explicit train/test index sets with provenance,
plus training-set transforms (dedup, label noise, similarity filtering).

Every constructor is a pure function of (cohort, params, seed) and every
FoldSet passes the leakage audit: the protocol key (target / family / year /
publication / scaffold) never crosses train and test.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ._util import substream
from .dataset import BinarisationScheme, Cohort, eligible_targets
from .errors import SpectraError, SplitError
from .features import max_train_similarity_rows

PROTOCOLS = (
    "RANDOM_KFOLD",
    "SCAFFOLD_KFOLD",
    "LOTO",
    "LOFO",
    "TEMPORAL",
    "CROSSLAB",
    "SPECTRA",
)


@dataclass(frozen=True)
class Fold:
    fold_key: str
    train: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "train", _frozen_idx(self.train))
        object.__setattr__(self, "test", _frozen_idx(self.test))
        if np.intersect1d(self.train, self.test).size:
            raise SplitError(f"fold {self.fold_key}: train/test overlap")


def _frozen_idx(a) -> np.ndarray:
    a = np.unique(np.asarray(a, dtype=np.int64))
    a.flags.writeable = False
    return a


@dataclass
class FoldSet:
    protocol: str
    folds: list[Fold]
    params: dict = field(default_factory=dict)

    def fold_keys(self) -> list[str]:
        return [f.fold_key for f in self.folds]


# ----------------------------------------------------------- constructors


def loto_folds(cohort: Cohort) -> FoldSet:
    """One fold per eligible target: its records test, everything else trains."""
    targets = eligible_targets(cohort, "LOTO")
    if not targets:
        raise SplitError("no LOTO-eligible targets")
    all_idx = np.arange(len(cohort))
    folds = []
    for tgt in targets:
        test = cohort.by_target[tgt]
        train = np.setdiff1d(all_idx, test)
        folds.append(Fold(tgt, train, test))
    return FoldSet("LOTO", folds, {"n_eligible": len(targets)})


def lofo_folds(cohort: Cohort, family_map: dict[str, str]) -> FoldSet:
    """One fold per family containing at least one eligible target.

    Test rows are the family's eligible targets; the family's remaining mapped
    targets leave training too (no family key may cross).  Targets outside the
    map are never tested and stay in training.
    """
    if not family_map:
        raise SplitError("empty family map")
    eligible = set(eligible_targets(cohort, "LOTO"))
    fam_targets: dict[str, list[str]] = {}
    for tgt, fam in family_map.items():
        if tgt in cohort.by_target:
            fam_targets.setdefault(fam, []).append(tgt)
    folds = []
    tested_targets = 0
    all_idx = np.arange(len(cohort))
    for fam in sorted(fam_targets, key=str):
        members = sorted(fam_targets[fam])
        tested = [t for t in members if t in eligible]
        if not tested:
            continue
        test = np.concatenate([cohort.by_target[t] for t in tested])
        held_out = np.concatenate([cohort.by_target[t] for t in members])
        train = np.setdiff1d(all_idx, held_out)
        if train.size == 0:
            raise SplitError(f"family {fam}: empty training set")
        folds.append(Fold(fam, train, test))
        tested_targets += len(tested)
    if not folds:
        raise SplitError("family map covers no eligible target")
    return FoldSet("LOFO", folds, {"n_families": len(folds), "n_tested_targets": tested_targets})


def crosslab_folds(cohort: Cohort) -> FoldSet:
    """Within-target cross-lab holdout.

    For each eligible target (>= 3 publications with >= 5 of its records each)
    and each of its qualifying publications, the (target, publication) block is
    the test set; the target's other publications remain in training (that is
    what makes the protocol within-target), as do other targets' records from
    the held-out publication.
    """
    targets = eligible_targets(cohort, "CROSSLAB")
    if not targets:
        raise SplitError("no cross-lab-eligible targets")
    all_idx = np.arange(len(cohort))
    folds = []
    for tgt in targets:
        idx = cohort.by_target[tgt]
        by_doi: dict[str, list[int]] = {}
        for i in idx:
            by_doi.setdefault(cohort.dois[i], []).append(int(i))
        for doi in sorted(d for d, rows in by_doi.items() if len(rows) >= 5):
            test = np.asarray(by_doi[doi], dtype=np.int64)
            train = np.setdiff1d(all_idx, test)
            folds.append(Fold(f"{tgt}|{doi}", train, test))
    return FoldSet("CROSSLAB", folds, {"n_targets": len(targets)})


def temporal_split(cohort: Cohort, train_before: int, test_year: int) -> FoldSet:
    """Single prospective fold: train years strictly before the cutoff, test
    records from exactly the test year; years in between belong to neither."""
    train = np.flatnonzero(cohort.years < train_before)
    test = np.flatnonzero(cohort.years == test_year)
    if train.size == 0:
        raise SplitError(f"no records before {train_before}")
    if test.size == 0:
        raise SplitError(f"no records in {test_year}")
    fold = Fold(f"pre{train_before}->{test_year}", train, test)
    return FoldSet("TEMPORAL", [fold], {"train_before": train_before, "test_year": test_year})


def random_kfold(cohort: Cohort, k: int, seed: int) -> FoldSet:
    """Seeded record-level shuffled partition into k near-equal folds."""
    n = len(cohort)
    if k < 2 or k > n:
        raise SplitError(f"k={k} out of range for {n} records")
    perm = substream(seed, "random_kfold").permutation(n)
    blocks = np.array_split(perm, k)
    all_idx = np.arange(n)
    folds = []
    for i, block in enumerate(blocks):
        folds.append(Fold(f"fold{i}", np.setdiff1d(all_idx, block), block))
    return FoldSet("RANDOM_KFOLD", folds, {"k": k, "seed": seed})


def scaffold_kfold(cohort: Cohort, scaffold_keys: dict[str, str], k: int, seed: int) -> FoldSet:
    """Group-aware partition: scaffold groups never split across folds.

    Greedy assignment, largest group first (ties by key), always into the
    currently smallest fold — deterministic regardless of the seed, which is
    recorded for provenance only.
    """
    missing = sorted({c for c in cohort.compound_ids if c not in scaffold_keys})
    if missing:
        raise SplitError(f"scaffold keys missing for {len(missing)} compounds", missing=missing[:10])
    groups: dict[str, list[int]] = {}
    for i, cid in enumerate(cohort.compound_ids):
        groups.setdefault(scaffold_keys[cid], []).append(i)
    if k < 2 or k > len(groups):
        raise SplitError(f"k={k} out of range for {len(groups)} scaffold groups")
    order = sorted(groups.items(), key=lambda kv: (-len(kv[1]), str(kv[0])))
    assignments: list[list[int]] = [[] for _ in range(k)]
    for _, rows in order:
        target = min(range(k), key=lambda j: (len(assignments[j]), j))
        assignments[target].extend(rows)
    all_idx = np.arange(len(cohort))
    folds = []
    for i, rows in enumerate(assignments):
        test = np.asarray(sorted(rows), dtype=np.int64)
        folds.append(Fold(f"fold{i}", np.setdiff1d(all_idx, test), test))
    return FoldSet("SCAFFOLD_KFOLD", folds, {"k": k, "seed": seed})


# ------------------------------------------------------------ transforms


def spectra_filter(
    base: FoldSet, s: float, fingerprints: np.ndarray, labels: Optional[np.ndarray] = None
) -> FoldSet:
    """Similarity-resolution filter at ceiling ``s``.

    Test molecules whose maximum train-set Tanimoto exceeds ``s`` are removed;
    training sets are untouched.  Folds whose filtered test set is empty (or,
    when labels are supplied, single-class and therefore unscorable) are
    dropped with a report entry.  Dropping every fold is an error carrying the
    report.
    """
    if not (0.0 < s <= 1.0):
        raise SplitError(f"s={s} outside (0, 1]")
    folds = []
    dropped = []
    for f in base.folds:
        sims = max_train_similarity_rows(fingerprints[f.test], fingerprints[f.train])
        keep = f.test[sims <= s]
        if keep.size < 2:
            dropped.append(
                {"fold_key": f.fold_key, "reason": "test_exhausted", "n_kept": int(keep.size)}
            )
            continue
        if labels is not None and len(set(np.asarray(labels)[keep].tolist())) < 2:
            dropped.append(
                {"fold_key": f.fold_key, "reason": "single_class", "n_kept": int(keep.size)}
            )
            continue
        folds.append(Fold(f.fold_key, f.train, keep))
    if not folds:
        raise SpectraError(f"all folds dropped at s={s}", report=dropped)
    params = dict(base.params)
    params.update({"s": s, "base_protocol": base.protocol, "dropped": dropped})
    return FoldSet("SPECTRA", folds, params)


def dedup_fold(fold: Fold, record_keys: np.ndarray) -> tuple[Fold, int]:
    """Remove training rows whose dedup key collides with any test key."""
    test_keys = set(record_keys[fold.test].tolist())
    keep_mask = np.asarray([record_keys[i] not in test_keys for i in fold.train])
    removed = int((~keep_mask).sum())
    train = fold.train[keep_mask]
    if train.size == 0:
        raise SplitError(f"fold {fold.fold_key}: dedup emptied the training set")
    return Fold(fold.fold_key, train, fold.test), removed


def dedup_train(foldset: FoldSet, record_keys: np.ndarray) -> FoldSet:
    """Apply ``dedup_fold`` across a FoldSet, recording removal counts."""
    folds = []
    removed: dict[str, int] = {}
    for f in foldset.folds:
        nf, n = dedup_fold(f, record_keys)
        folds.append(nf)
        removed[f.fold_key] = n
    params = dict(foldset.params)
    params["dedup_removed"] = removed
    return FoldSet(foldset.protocol, folds, params)


# ------------------------------------------------------------ label noise


@dataclass(frozen=True)
class LabelNoise:
    """Training-label perturbation model.

    kind: "uniform_flip" (each label flips independently with probability
    ``level``), "target_swap" (per target, round(level * min(n_pos, n_neg))
    disjoint positive/negative pairs exchange labels, preserving per-target
    positive counts), or "gaussian_logdc50" (labels re-derived from
    dc50 * 10^eps, eps ~ N(0, level^2), under the active scheme; rows without
    a dc50 reading keep their labels and are counted).
    """

    kind: str
    level: float

    def __post_init__(self):
        if self.kind not in ("uniform_flip", "target_swap", "gaussian_logdc50"):
            raise SplitError(f"unknown noise kind {self.kind!r}")
        if self.kind in ("uniform_flip", "target_swap") and not (0.0 <= self.level <= 1.0):
            raise SplitError("flip fraction must be in [0, 1]")
        if self.kind == "gaussian_logdc50" and self.level < 0:
            raise SplitError("sigma must be >= 0")


def apply_label_noise(
    labels: np.ndarray,
    noise: LabelNoise,
    cohort: Cohort,
    seed: int,
    indices: Optional[np.ndarray] = None,
    scheme: Optional[BinarisationScheme] = None,
) -> tuple[np.ndarray, dict]:
    """Perturbed copy of ``labels`` restricted to ``indices`` (default: all)."""
    labels = np.asarray(labels, dtype=bool).copy()
    idx = np.arange(labels.size) if indices is None else np.asarray(indices, dtype=np.int64)
    rng = substream(seed, "label_noise", noise.kind)
    info: dict = {"kind": noise.kind, "level": noise.level}
    if noise.kind == "uniform_flip":
        flips = rng.random(idx.size) < noise.level
        labels[idx[flips]] = ~labels[idx[flips]]
        info["n_flipped"] = int(flips.sum())
    elif noise.kind == "target_swap":
        n_sw = 0
        for tgt in sorted({cohort.target_ids[i] for i in idx}, key=str):
            rows = idx[np.asarray([cohort.target_ids[i] == tgt for i in idx])]
            pos = rows[labels[rows]]
            neg = rows[~labels[rows]]
            k = int(round(noise.level * min(pos.size, neg.size)))
            if k == 0:
                continue
            sel_pos = rng.choice(pos, size=k, replace=False)
            sel_neg = rng.choice(neg, size=k, replace=False)
            labels[sel_pos] = False
            labels[sel_neg] = True
            n_sw += k
        info["n_pairs_swapped"] = n_sw
    else:
        if scheme is None:
            raise SplitError("gaussian_logdc50 requires the active scheme")
        n_kept = 0
        for i in idx:
            rec = cohort.records[int(i)]
            if rec.dc50_nM is None:
                n_kept += 1
                continue
            eps = rng.normal(0.0, noise.level)
            derived = scheme.binarise(rec.dc50_nM * (10.0**eps), rec.dmax_pct)
            if derived is None:
                n_kept += 1
                continue
            labels[i] = derived
        info["n_kept_original"] = n_kept
    return labels, info


# ---------------------------------------------------------------- audits


def leakage_audit(
    foldset: FoldSet,
    cohort: Cohort,
    family_map: Optional[dict] = None,
    scaffold_keys: Optional[dict] = None,
) -> list[str]:
    """Protocol-key leakage check; returns violation strings (empty = clean)."""
    violations: list[str] = []
    proto = foldset.params.get("base_protocol", foldset.protocol)
    for f in foldset.folds:
        if np.intersect1d(f.train, f.test).size:
            violations.append(f"{f.fold_key}: train/test row overlap")
        if proto == "LOTO":
            tr = {cohort.target_ids[i] for i in f.train}
            te = {cohort.target_ids[i] for i in f.test}
            if tr & te:
                violations.append(f"{f.fold_key}: target crosses train/test: {sorted(tr & te)}")
        elif proto == "LOFO":
            fm = family_map or {}
            tr = {fm.get(cohort.target_ids[i]) for i in f.train} - {None}
            te = {fm.get(cohort.target_ids[i]) for i in f.test} - {None}
            if tr & te:
                violations.append(f"{f.fold_key}: family crosses train/test: {sorted(tr & te)}")
        elif proto == "CROSSLAB":
            pairs_tr = {(cohort.target_ids[i], cohort.dois[i]) for i in f.train}
            pairs_te = {(cohort.target_ids[i], cohort.dois[i]) for i in f.test}
            if pairs_tr & pairs_te:
                violations.append(f"{f.fold_key}: (target, publication) crosses train/test")
        elif proto == "TEMPORAL":
            cutoff = foldset.params["train_before"]
            test_year = foldset.params["test_year"]
            if np.any(cohort.years[f.train] >= cutoff):
                violations.append(f"{f.fold_key}: training year >= {cutoff}")
            if np.any(cohort.years[f.test] != test_year):
                violations.append(f"{f.fold_key}: test year != {test_year}")
        elif proto == "SCAFFOLD_KFOLD" and scaffold_keys is not None:
            tr = {scaffold_keys[cohort.compound_ids[i]] for i in f.train}
            te = {scaffold_keys[cohort.compound_ids[i]] for i in f.test}
            if tr & te:
                violations.append(f"{f.fold_key}: scaffold crosses train/test")
    return violations


# --------------------------------------------------------------- file I/O


def save_foldset(foldset: FoldSet, path) -> None:
    """Fold-assignment CSV (protocol, fold_key, role, record_index) plus a
    params sidecar; the pair round-trips losslessly through load_foldset."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["protocol", "fold_key", "role", "record_index"])
        for f in foldset.folds:
            for i in f.train:
                writer.writerow([foldset.protocol, f.fold_key, "train", int(i)])
            for i in f.test:
                writer.writerow([foldset.protocol, f.fold_key, "test", int(i)])
    sidecar = path.with_suffix(path.suffix + ".params.json")
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump(foldset.params, fh, sort_keys=True, indent=2, default=str)
        fh.write("\n")


def load_foldset(path) -> FoldSet:
    path = Path(path)
    protocol = None
    acc: dict[str, dict[str, list[int]]] = {}
    order: list[str] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["protocol", "fold_key", "role", "record_index"]:
            raise SplitError(f"{path}: bad fold file header")
        for row in reader:
            if not row:
                continue
            proto, key, role, idx = row
            protocol = protocol or proto
            if key not in acc:
                acc[key] = {"train": [], "test": []}
                order.append(key)
            acc[key][role].append(int(idx))
    if protocol is None:
        raise SplitError(f"{path}: empty fold file")
    folds = [Fold(k, acc[k]["train"], acc[k]["test"]) for k in order]
    params = {}
    sidecar = path.with_suffix(path.suffix + ".params.json")
    if sidecar.exists():
        params = json.loads(sidecar.read_text(encoding="utf-8"))
    return FoldSet(protocol, folds, params)
