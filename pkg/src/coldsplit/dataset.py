"""Measurement data model, binarisation schemes, eligibility filters, ingestion.

The on-disk interchange format is a UTF-8 CSV with the exact header

    compound_id,smiles,target_uniprot,family,e3,doi,year,dc50_nM,dmax_pct,cell_line,label

Empty strings mark missing optionals; ``label`` is ``0``, ``1`` or empty.
Rows that cannot yield a label are rejected with a reason code, never imputed.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import IngestError, SchemaError

CSV_HEADER = [
    "compound_id",
    "smiles",
    "target_uniprot",
    "family",
    "e3",
    "doi",
    "year",
    "dc50_nM",
    "dmax_pct",
    "cell_line",
    "label",
]

E3_TYPES = ("CRBN", "VHL", "OTHER")


@dataclass(frozen=True)
class BinarisationScheme:
    """Activity labelling rule over the continuous readouts.

    ``OR``: active if the concentration readout clears its threshold or the
    degradation readout clears its own.  ``AND`` requires both.  A missing
    readout never satisfies its arm; under AND a missing arm therefore forces
    the label False, under OR the other arm decides.  A row with neither
    readout has no derivable label (``binarise`` returns None).
    """

    dc50_threshold_nM: float
    dmax_threshold_pct: float
    combinator: str  # "OR" | "AND"
    name: str

    def __post_init__(self):
        if self.dc50_threshold_nM <= 0 or self.dmax_threshold_pct <= 0:
            raise SchemaError(f"scheme {self.name}: thresholds must be strictly positive")
        if self.combinator not in ("OR", "AND"):
            raise SchemaError(f"scheme {self.name}: combinator must be OR or AND")

    def binarise(self, dc50_nM: Optional[float], dmax_pct: Optional[float]) -> Optional[bool]:
        if dc50_nM is None and dmax_pct is None:
            return None
        dc50_ok = dc50_nM is not None and dc50_nM < self.dc50_threshold_nM
        dmax_ok = dmax_pct is not None and dmax_pct > self.dmax_threshold_pct
        if self.combinator == "OR":
            return dc50_ok or dmax_ok
        return dc50_ok and dmax_ok


# The configurable labelling-scheme set.  or_1000_50 is the default.
SCHEMES = {
    s.name: s
    for s in (
        BinarisationScheme(1000.0, 50.0, "OR", "or_1000_50"),
        BinarisationScheme(100.0, 80.0, "AND", "and_100_80"),
        BinarisationScheme(100.0, 80.0, "OR", "or_100_80"),
        BinarisationScheme(1000.0, 50.0, "AND", "and_1000_50"),
    )
}
DEFAULT_SCHEME = SCHEMES["or_1000_50"]


@dataclass
class Record:
    """One degradation measurement."""

    compound_id: str
    structure: str
    target_id: str
    e3: str
    doi: str
    year: int
    family_id: Optional[str] = None
    dc50_nM: Optional[float] = None
    dmax_pct: Optional[float] = None
    cell_line: Optional[str] = None
    label: Optional[bool] = None

    def validate(self) -> Optional[str]:
        """Return a rejection reason code, or None if the record is valid."""
        if self.dc50_nM is not None and not (self.dc50_nM > 0 and math.isfinite(self.dc50_nM)):
            return "bad_dc50"
        if self.dmax_pct is not None and not (0.0 <= self.dmax_pct <= 100.0):
            return "bad_dmax"
        if not (1000 <= self.year <= 9999):
            return "bad_year"
        if self.dc50_nM is None and self.dmax_pct is None and self.label is None:
            return "no_label_evidence"
        if self.e3 not in E3_TYPES:
            return "bad_e3"
        return None


class Cohort:
    """Immutable ordered collection of records plus derived indices.

    Record order is ingestion order; all downstream determinism keys off it.
    Column arrays are read-only so the cohort is safe for concurrent reads.
    """

    def __init__(self, records: Iterable[Record], rejections: Optional[list] = None):
        self.records: tuple[Record, ...] = tuple(records)
        if not self.records:
            raise IngestError("cohort has no valid records")
        self.rejections: tuple = tuple(rejections or ())
        n = len(self.records)
        self.compound_ids = np.array([r.compound_id for r in self.records], dtype=object)
        self.structures = np.array([r.structure for r in self.records], dtype=object)
        self.target_ids = np.array([r.target_id for r in self.records], dtype=object)
        self.family_ids = np.array([r.family_id for r in self.records], dtype=object)
        self.dois = np.array([r.doi for r in self.records], dtype=object)
        self.years = np.array([r.year for r in self.records], dtype=np.int64)
        self.labels = np.array(
            [bool(r.label) if r.label is not None else False for r in self.records], dtype=bool
        )
        self._has_label = np.array([r.label is not None for r in self.records], dtype=bool)
        for arr in (self.years, self.labels, self._has_label):
            arr.flags.writeable = False

        self.by_target: dict[str, np.ndarray] = _index(self.target_ids)
        self.by_doi: dict[str, np.ndarray] = _index(self.dois)
        self.by_family: dict[str, np.ndarray] = _index(
            self.family_ids, skip=lambda k: k is None or k == ""
        )
        self.n = n

    def __len__(self) -> int:
        return self.n

    @property
    def labels_complete(self) -> bool:
        return bool(self._has_label.all())

    def family_map(self) -> dict[str, str]:
        """target_id -> family_id for targets carrying a family annotation."""
        out: dict[str, str] = {}
        for r in self.records:
            if r.family_id:
                out.setdefault(r.target_id, r.family_id)
        return out


def _index(keys: np.ndarray, skip=None) -> dict:
    out: dict = {}
    for i, k in enumerate(keys):
        if skip is not None and skip(k):
            continue
        out.setdefault(k, []).append(i)
    frozen = {}
    for k in sorted(out, key=str):
        arr = np.asarray(out[k], dtype=np.int64)
        arr.flags.writeable = False
        frozen[k] = arr
    return frozen


def _opt_float(text: str) -> Optional[float]:
    text = text.strip()
    return float(text) if text else None


def load_cohort(path, scheme: BinarisationScheme = DEFAULT_SCHEME) -> Cohort:
    """Ingest the release CSV into a Cohort.

    An explicit label column wins over re-binarisation (continuous values are
    only partially recoverable upstream).  Any row-level failure rejects the
    row with a reason code and the run continues; a malformed header or an
    empty result is fatal.
    """
    records: list[Record] = []
    rejections: list[tuple[int, str]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        if header != CSV_HEADER:
            raise IngestError(
                f"{path}: header mismatch", expected=CSV_HEADER, found=header
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(CSV_HEADER):
                rejections.append((lineno, "bad_field_count"))
                continue
            raw = dict(zip(CSV_HEADER, row))
            try:
                dc50 = _opt_float(raw["dc50_nM"])
                dmax = _opt_float(raw["dmax_pct"])
                year = int(raw["year"])
            except ValueError:
                rejections.append((lineno, "bad_numeric"))
                continue
            label_txt = raw["label"].strip()
            if label_txt not in ("", "0", "1"):
                rejections.append((lineno, "bad_label"))
                continue
            e3 = raw["e3"].strip().upper()
            rec = Record(
                compound_id=raw["compound_id"].strip(),
                structure=raw["smiles"],
                target_id=raw["target_uniprot"].strip(),
                family_id=raw["family"].strip() or None,
                e3=e3 if e3 in ("CRBN", "VHL") else "OTHER",
                doi=raw["doi"].strip(),
                year=year,
                dc50_nM=dc50,
                dmax_pct=dmax,
                cell_line=raw["cell_line"].strip() or None,
                label=bool(int(label_txt)) if label_txt else None,
            )
            reason = rec.validate()
            if reason is not None:
                rejections.append((lineno, reason))
                continue
            if rec.label is None:
                derived = scheme.binarise(rec.dc50_nM, rec.dmax_pct)
                if derived is None:
                    rejections.append((lineno, "no_label_evidence"))
                    continue
                rec.label = derived
            records.append(rec)
    if not records:
        raise IngestError(f"{path}: zero valid rows", rejections=len(rejections))
    return Cohort(records, rejections)


def relabel(cohort: Cohort, scheme: BinarisationScheme) -> np.ndarray:
    """Label vector re-derived from the continuous readouts under ``scheme``.

    Rows without both readouts keep their ingested label (binarisation-scheme
    comparisons only move rows the scheme can actually decide).
    """
    out = cohort.labels.copy()
    for i, r in enumerate(cohort.records):
        derived = scheme.binarise(r.dc50_nM, r.dmax_pct)
        if derived is not None:
            out[i] = derived
    return out


def eligible_targets(cohort: Cohort, rule: str) -> list[str]:
    """Targets satisfying an evaluation-cohort filter.

    LOTO: at least 10 records and positive rate within [0.1, 0.9].
    CROSSLAB: at least 3 publications with at least 5 records each.
    Deterministic: sorted target ids; invariant to record order.
    """
    if not cohort.labels_complete:
        raise IngestError("eligibility requires fully populated labels")
    out = []
    for tgt in sorted(cohort.by_target, key=str):
        idx = cohort.by_target[tgt]
        if rule == "LOTO":
            if len(idx) < 10:
                continue
            rate = float(cohort.labels[idx].mean())
            if 0.1 <= rate <= 0.9:
                out.append(tgt)
        elif rule == "CROSSLAB":
            doi_counts: dict[str, int] = {}
            for i in idx:
                doi_counts[cohort.dois[i]] = doi_counts.get(cohort.dois[i], 0) + 1
            if sum(1 for c in doi_counts.values() if c >= 5) >= 3:
                out.append(tgt)
        else:
            raise SchemaError(f"unknown eligibility rule {rule!r}")
    return out


@dataclass
class FoldChangeRow:
    target_id: str
    n_pairs: int
    median_fold_change: float
    iqr_lo: float
    iqr_hi: float
    p95: float


@dataclass
class FoldChangeTable:
    rows: list[FoldChangeRow] = field(default_factory=list)
    aggregate: Optional[FoldChangeRow] = None
    n_skipped_missing_dc50: int = 0


def fold_change_anchor(cohort: Cohort) -> FoldChangeTable:
    """Between-publication concentration reproducibility on replicate compounds.

    For each target, same-compound measurements from different publications are
    paired once per unordered DOI pair; the fold change is the ratio of the
    larger to the smaller reading.  Multiple readings of a compound within one
    publication enter through their geometric mean.  Pairs missing a reading on
    either side are skipped and counted in a coverage statistic.
    """
    rows: list[FoldChangeRow] = []
    all_folds: list[float] = []
    skipped = 0
    for tgt in sorted(cohort.by_target, key=str):
        idx = cohort.by_target[tgt]
        # (compound, doi) -> list of dc50
        cells: dict[tuple[str, str], list[float]] = {}
        missing: set[tuple[str, str]] = set()
        for i in idx:
            r = cohort.records[i]
            key = (r.compound_id, r.doi)
            if r.dc50_nM is None:
                missing.add(key)
                continue
            cells.setdefault(key, []).append(r.dc50_nM)
        by_compound: dict[str, list[tuple[str, float]]] = {}
        for (comp, doi), vals in cells.items():
            geo = float(np.exp(np.mean(np.log(vals))))
            by_compound.setdefault(comp, []).append((doi, geo))
        folds: list[float] = []
        for comp, entries in sorted(by_compound.items()):
            entries = sorted(entries)
            for a in range(len(entries)):
                for b in range(a + 1, len(entries)):
                    hi, lo = max(entries[a][1], entries[b][1]), min(entries[a][1], entries[b][1])
                    folds.append(hi / lo)
        skipped += len(missing)
        if folds:
            rows.append(_fold_row(tgt, folds))
            all_folds.extend(folds)
    table = FoldChangeTable(rows=rows, n_skipped_missing_dc50=skipped)
    if all_folds:
        table.aggregate = _fold_row("__all__", all_folds)
    else:
        warnings.warn("no replicate compound pairs with dc50 on both sides")
    return table


def _fold_row(tgt: str, folds: list[float]) -> FoldChangeRow:
    logf = np.abs(np.log10(folds))
    med = 10 ** float(np.median(logf))
    q1, q3 = (10 ** float(np.percentile(logf, q)) for q in (25, 75))
    p95 = 10 ** float(np.percentile(logf, 95))
    return FoldChangeRow(tgt, len(folds), med, q1, q3, p95)


def save_cohort_csv(cohort: Cohort, path) -> None:
    """Write a cohort back out in the ingestion schema (lossless round trip)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in cohort.records:
            writer.writerow(
                [
                    r.compound_id,
                    r.structure,
                    r.target_id,
                    r.family_id or "",
                    r.e3,
                    r.doi,
                    r.year,
                    "" if r.dc50_nM is None else repr(r.dc50_nM),
                    "" if r.dmax_pct is None else repr(r.dmax_pct),
                    r.cell_line or "",
                    "" if r.label is None else int(r.label),
                ]
            )


def save_rejections(rejections, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["line_number", "reason_code"])
        for lineno, reason in rejections:
            writer.writerow([lineno, reason])
