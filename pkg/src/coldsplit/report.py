"""Report emission: delimited tables, structured documents, manifests.

Reports are byte-stable: floats are serialised with shortest round-trip
``repr``, rows are emitted in canonical order, and no timestamps enter any
file, so identical configurations produce identical bytes across runs and
worker counts.  The manifest records the canonical configuration, its hash,
the seed list, the library version and a content hash of every input file.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from . import __version__
from ._util import sha256_file, sha256_text


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
    return path


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2, default=_coerce) + "\n"


def _coerce(obj):
    try:
        import numpy as np

        if isinstance(obj, (np.integer,)):
            return int(obj)
        if isinstance(obj, (np.floating,)):
            return float(obj)
        if isinstance(obj, np.ndarray):
            return obj.tolist()
    except ImportError:
        pass
    if hasattr(obj, "__dataclass_fields__"):
        return {k: getattr(obj, k) for k in obj.__dataclass_fields__}
    return str(obj)


def write_json(path, doc) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(doc), encoding="utf-8")
    return path


def config_hash(config: dict) -> str:
    return sha256_text(canonical_json(config))


def write_manifest(out_dir, config: dict, seeds, inputs: dict, outputs: list) -> Path:
    """The provenance document accompanying every report directory."""
    manifest = {
        "tool": "coldsplit",
        "version": __version__,
        "config": config,
        "config_sha256": config_hash(config),
        "seeds": list(seeds),
        "inputs": {str(k): sha256_file(v) for k, v in inputs.items() if v is not None},
        "outputs": sorted(str(o) for o in outputs),
    }
    return write_json(Path(out_dir) / "manifest.json", manifest)


def write_fold_scores(path, run) -> Path:
    """Per-fold score table: one row per (seed, fold)."""
    header = [
        "protocol",
        "seed",
        "fold_key",
        "n",
        "pos_rate",
        "auroc",
        "auprc",
        "auprc_spread",
        "brier",
        "ece10",
        "degenerate",
        "trainable",
    ]
    rows = []
    for r in run.results:
        s = r.score
        rows.append(
            [
                run.foldset.protocol,
                r.seed,
                r.fold_key,
                s.n if s else len(r.test_idx),
                s.pos_rate if s else None,
                s.auroc if s else None,
                s.auprc if s else None,
                s.auprc_spread if s else None,
                s.brier if s else None,
                s.ece10 if s else None,
                s.degenerate if s else True,
                r.trainable,
            ]
        )
    return write_csv(path, header, rows)


def write_summary(path, run, pooled_by_seed=None) -> Path:
    """Aggregate summary: per-seed macro (and pooled when supplied)."""
    header = ["seed", "macro_auroc", "pooled_auroc", "n_folds", "n_degenerate"]
    macros = run.macro_by_seed()
    rows = []
    for s in run.seeds:
        by = run.by_seed(s)
        rows.append(
            [
                s,
                macros.get(s),
                None if pooled_by_seed is None else pooled_by_seed.get(s),
                len(by),
                sum(1 for r in by if r.score is None or r.score.degenerate),
            ]
        )
    return write_csv(path, header, rows)


def write_anova_terms(path, terms) -> Path:
    header = ["term", "ss", "df", "ms", "eta_sq", "omega_sq", "ci_lo", "ci_hi"]
    rows = [
        [
            t.name,
            t.ss,
            t.df,
            t.ms,
            t.eta_sq,
            t.omega_sq,
            t.ci95[0] if t.ci95 else None,
            t.ci95[1] if t.ci95 else None,
        ]
        for t in terms
    ]
    return write_csv(path, header, rows)
