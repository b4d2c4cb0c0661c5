"""Command-line orchestration: configuration, seed management, reports.

Every subcommand writes its tables plus a manifest into --out.  Reports are
byte-identical across repeated runs and worker counts.  Fatal errors exit
nonzero after writing a machine-readable error document (error.json in --out
when resolvable, always echoed to stderr as JSON).
"""

from __future__ import annotations

import json
import sys
from functools import wraps
from pathlib import Path

import click
import numpy as np
import yaml

from . import __version__
from .calibrate import run_calibration
from .dataset import (
    DEFAULT_SCHEME,
    SCHEMES,
    Cohort,
    fold_change_anchor,
    load_cohort,
    save_cohort_csv,
    save_rejections,
)
from .decompose import (
    FactorialCell,
    NoiseCurve,
    audit_trials,
    factorial_marginals,
    load_trial_table,
    noise_calibration,
    power_grid,
    run_cascade,
    run_noise_curve,
    spectra_sweep,
)
from .errors import ColdsplitError, ConfigError
from .features import (
    DEFAULT_NGRAM,
    DEFAULT_WIDTH,
    featurize_structures,
    fingerprint_coverage,
    load_fingerprints,
)
from .fewshot import evaluate_fewshot
from .metrics import POOLED, aggregate
from .model import ForestConfig
from .report import write_csv, write_fold_scores, write_json, write_manifest, write_summary
from .runner import CANONICAL_SEEDS, evaluate_foldset
from .splits import (
    crosslab_folds,
    leakage_audit,
    loto_folds,
    lofo_folds,
    random_kfold,
    save_foldset,
    scaffold_kfold,
    temporal_split,
)
from .synth import SynthSpec, generate_cohort, spec_from_dict


def _fail(err: ColdsplitError, out_dir=None):
    doc = err.to_dict()
    sys.stderr.write(json.dumps(doc, default=str) + "\n")
    if out_dir is not None:
        try:
            write_json(Path(out_dir) / "error.json", doc)
        except OSError:
            pass
    raise SystemExit(2)


def handles_errors(fn):
    @wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ColdsplitError as err:
            _fail(err, kwargs.get("out"))

    return wrapper


def _parse_seeds(text) -> tuple:
    if not text:
        return CANONICAL_SEEDS
    seeds = tuple(int(s) for s in str(text).replace(",", " ").split())
    if not seeds or len(set(seeds)) != len(seeds):
        raise ConfigError("seed list must be non-empty and distinct")
    return seeds


def _parse_floats(text) -> list:
    return [float(s) for s in str(text).replace(",", " ").split()]


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return doc


def _merge(cfg: dict, **flags) -> dict:
    # Flags override file values; None flags fall back to the file.
    out = dict(cfg)
    for k, v in flags.items():
        if v is not None:
            out[k] = v
    return out


class Inputs:
    def __init__(self, cohort: Cohort, X: np.ndarray, files: dict, config: dict):
        self.cohort = cohort
        self.X = X
        self.files = files
        self.config = config


def _load_inputs(
    data, synth_spec, scheme_name, fingerprints, ngram_min, ngram_max, width
) -> Inputs:
    if (data is None) == (synth_spec is None):
        raise ConfigError("exactly one data source required: --data or --synth-spec")
    scheme = SCHEMES.get(scheme_name or DEFAULT_SCHEME.name)
    if scheme is None:
        raise ConfigError(f"unknown scheme {scheme_name!r}; choices: {sorted(SCHEMES)}")
    files = {}
    if data is not None:
        cohort = load_cohort(data, scheme)
        files["data"] = data
        source = {"data": str(data)}
    else:
        spec_doc = _load_config_file(synth_spec)
        spec = spec_from_dict({**spec_doc, "scheme": spec_doc.get("scheme", scheme.name)})
        cohort = generate_cohort(spec)
        files["synth_spec"] = synth_spec
        source = {"synth_spec": str(synth_spec)}
    if fingerprints is not None:
        fps = load_fingerprints(fingerprints)
        missing = fingerprint_coverage(fps, cohort.compound_ids)
        if missing:
            raise ConfigError(
                f"fingerprint file misses {len(missing)} compounds", missing=missing[:10]
            )
        X = np.stack([fps[c].bits for c in cohort.compound_ids]).astype(np.uint8)
        files["fingerprints"] = fingerprints
        feat = {"fingerprints": str(fingerprints)}
    else:
        X = featurize_structures(cohort.structures, ngram_min, ngram_max, width).astype(np.uint8)
        feat = {"featurizer": "hashed_ngram", "n_min": ngram_min, "n_max": ngram_max, "width": width}
    config = {"source": source, "features": feat, "scheme": scheme.name}
    return Inputs(cohort, X, files, config)


def _build_foldset(inputs: Inputs, protocol: str, k: int, seed: int, cutoff: int, test_year: int):
    cohort = inputs.cohort
    protocol = protocol.upper()
    if protocol == "LOTO":
        return loto_folds(cohort)
    if protocol == "LOFO":
        fam = cohort.family_map()
        return lofo_folds(cohort, fam)
    if protocol == "CROSSLAB":
        return crosslab_folds(cohort)
    if protocol == "TEMPORAL":
        return temporal_split(cohort, cutoff, test_year)
    if protocol == "RANDOM_KFOLD":
        return random_kfold(cohort, k, seed)
    if protocol == "SCAFFOLD_KFOLD":
        keys = {c: s for c, s in zip(cohort.compound_ids, cohort.structures)}
        return scaffold_kfold(cohort, keys, k, seed)
    raise ConfigError(f"unknown protocol {protocol!r}")


def _model_config(cfg: dict) -> ForestConfig:
    return ForestConfig(
        n_trees=int(cfg.get("n_trees", 200)),
        min_samples_leaf=int(cfg.get("min_samples_leaf", 3)),
        class_balanced=bool(cfg.get("class_balanced", True)),
        max_features=str(cfg.get("max_features", "SQRT")),
    )


source_options = [
    click.option("--data", type=click.Path(exists=True, dir_okay=False), default=None),
    click.option("--synth-spec", type=click.Path(exists=True, dir_okay=False), default=None),
    click.option("--fingerprints", type=click.Path(exists=True, dir_okay=False), default=None),
    click.option("--scheme", "scheme_name", default=None, help=f"one of {sorted(SCHEMES)}"),
    click.option("--ngram-min", default=DEFAULT_NGRAM[0], show_default=True),
    click.option("--ngram-max", default=DEFAULT_NGRAM[1], show_default=True),
    click.option("--width", default=DEFAULT_WIDTH, show_default=True),
    click.option("--config", "config_file", type=click.Path(exists=True), default=None),
]

run_options = [
    click.option("--seeds", default=None, help="default: the canonical ten"),
    click.option("--workers", default=1, show_default=True),
    click.option("--n-trees", default=None, type=int),
    click.option("--min-samples-leaf", default=None, type=int),
]


def add_options(opts):
    def deco(fn):
        for opt in reversed(opts):
            fn = opt(fn)
        return fn

    return deco


@click.group()
@click.version_option(version=__version__)
def main():
    """Cold-split evaluation and variance decomposition."""


def _common(config_file, data, synth_spec, scheme_name, fingerprints, ngram_min, ngram_max, width,
            seeds=None, n_trees=None, min_samples_leaf=None):
    cfg = _load_config_file(config_file)
    data = data or cfg.get("data")
    synth_spec = synth_spec or cfg.get("synth_spec")
    scheme_name = scheme_name or cfg.get("scheme")
    fingerprints = fingerprints or cfg.get("fingerprints")
    inputs = _load_inputs(data, synth_spec, scheme_name, fingerprints, ngram_min, ngram_max, width)
    seeds = _parse_seeds(seeds or cfg.get("seeds"))
    model_cfg = _model_config(
        _merge(cfg.get("model", {}), n_trees=n_trees, min_samples_leaf=min_samples_leaf)
    )
    inputs.config["model"] = {
        "n_trees": model_cfg.n_trees,
        "min_samples_leaf": model_cfg.min_samples_leaf,
        "class_balanced": model_cfg.class_balanced,
        "max_features": model_cfg.max_features,
    }
    return inputs, seeds, model_cfg


@main.command()
@add_options(source_options)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@handles_errors
def ingest(data, synth_spec, fingerprints, scheme_name, ngram_min, ngram_max, width, config_file, out):
    """Load a dataset, emit the rejection report and label statistics."""
    inputs, _, _ = _common(config_file, data, synth_spec, scheme_name, fingerprints,
                           ngram_min, ngram_max, width)
    cohort = inputs.cohort
    out = Path(out)
    outputs = [
        write_csv(
            out / "label_stats.csv",
            ["n_records", "n_targets", "n_publications", "pos_rate", "n_rejected"],
            [[len(cohort), len(cohort.by_target), len(cohort.by_doi),
              float(cohort.labels.mean()), len(cohort.rejections)]],
        )
    ]
    save_rejections(cohort.rejections, out / "rejections.csv")
    outputs.append(out / "rejections.csv")
    anchor = fold_change_anchor(cohort)
    rows = [
        [r.target_id, r.n_pairs, r.median_fold_change, r.iqr_lo, r.iqr_hi, r.p95]
        for r in anchor.rows
    ]
    if anchor.aggregate:
        a = anchor.aggregate
        rows.append([a.target_id, a.n_pairs, a.median_fold_change, a.iqr_lo, a.iqr_hi, a.p95])
    outputs.append(
        write_csv(out / "fold_change_anchor.csv",
                  ["target_id", "n_pairs", "median_fold_change", "iqr_lo", "iqr_hi", "p95"], rows)
    )
    write_manifest(out, inputs.config, [], inputs.files, outputs)
    click.echo(f"ingested {len(cohort)} records ({len(cohort.rejections)} rejected)")


@main.command()
@add_options(source_options)
@click.option("--protocol", required=True)
@click.option("--k", default=5, show_default=True)
@click.option("--split-seed", default=0, show_default=True)
@click.option("--cutoff", default=2023, show_default=True)
@click.option("--test-year", default=2024, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@handles_errors
def folds(data, synth_spec, fingerprints, scheme_name, ngram_min, ngram_max, width, config_file,
          protocol, k, split_seed, cutoff, test_year, out):
    """Construct fold assignments for a protocol and audit them."""
    inputs, _, _ = _common(config_file, data, synth_spec, scheme_name, fingerprints,
                           ngram_min, ngram_max, width)
    fs = _build_foldset(inputs, protocol, k, split_seed, cutoff, test_year)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_foldset(fs, out / "folds.csv")
    violations = leakage_audit(fs, inputs.cohort, family_map=inputs.cohort.family_map())
    write_json(out / "leakage_audit.json", {"protocol": fs.protocol, "violations": violations})
    write_manifest(out, {**inputs.config, "protocol": fs.protocol}, [], inputs.files,
                   [out / "folds.csv", out / "leakage_audit.json"])
    if violations:
        _fail(ConfigError(f"{len(violations)} leakage violations"), out)
    click.echo(f"{fs.protocol}: {len(fs.folds)} folds, leakage clean")


@main.command()
@add_options(source_options)
@add_options(run_options)
@click.option("--protocol", required=True)
@click.option("--k", default=5, show_default=True)
@click.option("--split-seed", default=0, show_default=True)
@click.option("--cutoff", default=2023, show_default=True)
@click.option("--test-year", default=2024, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@handles_errors
def run(data, synth_spec, fingerprints, scheme_name, ngram_min, ngram_max, width, config_file,
        seeds, workers, n_trees, min_samples_leaf, protocol, k, split_seed, cutoff, test_year, out):
    """Evaluate a protocol across seeds; emit per-fold scores and a summary."""
    inputs, seed_list, model_cfg = _common(config_file, data, synth_spec, scheme_name, fingerprints,
                                           ngram_min, ngram_max, width, seeds, n_trees, min_samples_leaf)
    fs = _build_foldset(inputs, protocol, k, split_seed, cutoff, test_year)
    ev = evaluate_foldset(inputs.X, inputs.cohort.labels, fs, model_cfg, seed_list, workers,
                          cohort=inputs.cohort)
    out = Path(out)
    pooled = {}
    for s in seed_list:
        evs = [r.fold_eval for r in ev.by_seed(s) if r.fold_eval is not None]
        if evs:
            try:
                pooled[s] = aggregate(evs, POOLED)
            except ColdsplitError:
                pooled[s] = None
    outputs = [
        write_fold_scores(out / "per_fold_scores.csv", ev),
        write_summary(out / "summary.csv", ev, pooled),
    ]
    write_manifest(out, {**inputs.config, "protocol": fs.protocol, "workers_independent": True},
                   seed_list, inputs.files, outputs)
    macros = ev.macro_by_seed()
    overall = float(np.mean(list(macros.values()))) if macros else float("nan")
    click.echo(f"{fs.protocol}: macro AUROC {overall:.4f} over {len(seed_list)} seeds")


@main.command()
@add_options(source_options)
@add_options(run_options)
@click.option("--s-thresholds", default="0.5,0.6,0.7,0.8,0.9,0.95", show_default=True)
@click.option("--k", default=5, show_default=True)
@click.option("--split-seed", default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@handles_errors
def spectra(data, synth_spec, fingerprints, scheme_name, ngram_min, ngram_max, width, config_file,
            seeds, workers, n_trees, min_samples_leaf, s_thresholds, k, split_seed, out):
    """Similarity-resolution sweep over train-test Tanimoto ceilings."""
    inputs, seed_list, model_cfg = _common(config_file, data, synth_spec, scheme_name, fingerprints,
                                           ngram_min, ngram_max, width, seeds, n_trees, min_samples_leaf)
    base = random_kfold(inputs.cohort, k, split_seed)
    sweep = spectra_sweep(inputs.X, inputs.cohort.labels, base, inputs.X.astype(bool),
                          model_cfg, _parse_floats(s_thresholds), seed_list, workers)
    out = Path(out)
    outputs = [
        write_csv(out / "spectra_curve.csv",
                  ["s", "macro_auroc", "sd", "n_folds", "n_dropped"],
                  [[p.s, p.macro_mean, p.macro_sd, p.n_folds, p.n_dropped] for p in sweep.points]),
        write_json(out / "spectra_summary.json",
                   {"auspc": sweep.auspc_value,
                    "range": [sweep.points[0].s, sweep.points[-1].s] if sweep.points else None,
                    "dropped": sweep.dropped}),
    ]
    write_manifest(out, inputs.config, seed_list, inputs.files, outputs)
    click.echo(f"AUSPC {sweep.auspc_value}")


@main.command()
@add_options(source_options)
@add_options(run_options)
@click.option("--bootstrap", default=2000, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@handles_errors
def cascade(data, synth_spec, fingerprints, scheme_name, ngram_min, ngram_max, width, config_file,
            seeds, workers, n_trees, min_samples_leaf, bootstrap, out):
    """Within-target cross-lab cascade and the inter-laboratory bound."""
    inputs, seed_list, model_cfg = _common(config_file, data, synth_spec, scheme_name, fingerprints,
                                           ngram_min, ngram_max, width, seeds, n_trees, min_samples_leaf)
    res = run_cascade(inputs.X, inputs.cohort, model_cfg, seed_list, workers=workers, n_boot=bootstrap)
    out = Path(out)
    outputs = [
        write_csv(out / "cascade_per_target.csv",
                  ["target_id", "rcv_auroc", "crosslab_auroc", "loto_auroc", "rcv_minus_crosslab"],
                  [[t, a, b, c, a - b] for t, a, b, c in res.per_target]),
        write_json(out / "cascade_summary.json",
                   {"rcv_macro": res.rcv_macro, "crosslab_macro": res.crosslab_macro,
                    "loto_macro": res.loto_macro, "interlab_bound": res.interlab_bound,
                    "paired_n": res.paired_n, "ci95": res.ci95}),
    ]
    write_manifest(out, inputs.config, seed_list, inputs.files, outputs)
    click.echo(
        f"cascade {res.rcv_macro:.3f} -> {res.crosslab_macro:.3f} -> {res.loto_macro:.3f}; "
        f"bound {res.interlab_bound:.3f}"
    )


@main.command("noise-cal")
@add_options(source_options)
@add_options(run_options)
@click.option("--noise-model", default="uniform_flip", show_default=True,
              type=click.Choice(["uniform_flip", "target_swap", "gaussian_logdc50"]))
@click.option("--levels", default="0,0.01,0.02,0.05,0.10,0.15,0.20", show_default=True)
@click.option("--bound", type=float, required=True)
@click.option("--curve", "curve_csv", type=click.Path(exists=True, dir_okay=False), default=None,
              help="precomputed (level, mean, sd, n) curve; skips evaluation")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@handles_errors
def noise_cal(data, synth_spec, fingerprints, scheme_name, ngram_min, ngram_max, width, config_file,
              seeds, workers, n_trees, min_samples_leaf, noise_model, levels, bound, curve_csv, out):
    """Noise calibration: degradation curve plus bound projection."""
    out = Path(out)
    inputs = None
    if curve_csv is not None:
        import csv as _csv

        with open(curve_csv, newline="", encoding="utf-8") as fh:
            rdr = _csv.DictReader(fh)
            points = [(float(r["level"]), float(r["mean"]), float(r.get("sd", 0) or 0),
                       int(r.get("n_seeds", 1) or 1)) for r in rdr]
        curve = NoiseCurve(points=sorted(points)).fit()
        config = {"curve": str(curve_csv)}
        files = {"curve": curve_csv}
        seed_list = []
    else:
        inputs, seed_list, model_cfg = _common(config_file, data, synth_spec, scheme_name,
                                               fingerprints, ngram_min, ngram_max, width,
                                               seeds, n_trees, min_samples_leaf)
        fs = loto_folds(inputs.cohort)
        curve = run_noise_curve(inputs.X, inputs.cohort.labels, fs, inputs.cohort, model_cfg,
                                noise_model, _parse_floats(levels), seed_list,
                                SCHEMES[inputs.config["scheme"]], workers)
        config = {**inputs.config, "noise_model": noise_model}
        files = inputs.files
    proj = noise_calibration(curve, bound)
    outputs = [
        write_csv(out / "noise_curve.csv", ["level", "mean", "sd", "n_seeds"],
                  [list(p) for p in curve.points]),
        write_json(out / "noise_projection.json",
                   {"bound": bound, "flip_equivalent": proj.flip_equivalent,
                    "pi80_half_width": proj.pi_half_width, "slope": proj.slope,
                    "intercept": proj.intercept, "residual_se": proj.residual_se}),
    ]
    write_manifest(out, config, seed_list, files, outputs)
    click.echo(f"projection {proj.flip_equivalent:.2f} (slope {proj.slope:.4g})")


@main.command("audit-hpo")
@click.option("--trials", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--dimensions", required=True, help="comma-separated dimension column names")
@click.option("--revalidated", type=click.Path(exists=True, dir_okay=False), required=True,
              help="CSV: trial_id,mean,sd")
@click.option("--top-k", default=10, show_default=True)
@click.option("--candidate-threshold", default=0.55, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@handles_errors
def audit_hpo(trials, dimensions, revalidated, top_k, candidate_threshold, out):
    """Selection-bias audit of a hyperparameter-search trial table."""
    import csv as _csv

    dims = [d.strip() for d in dimensions.split(",") if d.strip()]
    table = load_trial_table(trials, dims)
    reval = {}
    with open(revalidated, newline="", encoding="utf-8") as fh:
        for r in _csv.DictReader(fh):
            reval[r["trial_id"]] = (float(r["mean"]), float(r["sd"]))
    report = audit_trials(table, top_k, reval, candidate_threshold)
    out = Path(out)
    outputs = [
        write_csv(out / "rank_regressions.csv",
                  ["rank", "trial_id", "objective", "validated_mean", "validated_sd", "regression"],
                  report.ranks),
        write_csv(out / "dimension_shares.csv", ["dimension", "omega_sq"],
                  report.dimension_shares),
        write_json(out / "audit_summary.json",
                   {"spearman_top_k": report.spearman_top_k,
                    "spearman_2_to_k": report.spearman_2_to_k,
                    "observed_max": report.observed_max,
                    "candidate_sigma": report.candidate_sigma,
                    "candidate_mean": report.candidate_mean,
                    "expected_max": report.expected_max_value,
                    "observed_excess": report.observed_excess,
                    "n_trials": report.n_trials}),
    ]
    write_manifest(out, {"trials": str(trials), "dimensions": dims, "top_k": top_k},
                   [], {"trials": trials, "revalidated": revalidated}, outputs)
    click.echo(f"rank-1 regression {report.ranks[0][5]:.4f}; expected max {report.expected_max_value:.4f}")


@main.command()
@click.option("--cells", "cells_csv", type=click.Path(exists=True, dir_okay=False), required=True,
              help="CSV: key,mean,sd plus optional long-format key,target,value rows")
@click.option("--factors", default="M,W,A,K", show_default=True)
@click.option("--anchor", default="M", show_default=True)
@click.option("--bootstrap", default=5000, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@handles_errors
def factorial(cells_csv, factors, anchor, bootstrap, out):
    """Anchored factorial marginals from per-cell results."""
    import csv as _csv

    cells: dict[str, FactorialCell] = {}
    per_target: dict[str, dict] = {}
    with open(cells_csv, newline="", encoding="utf-8") as fh:
        for r in _csv.DictReader(fh):
            key = r["key"].strip()
            if r.get("target"):
                per_target.setdefault(key, {})[r["target"]] = float(r["value"])
            else:
                cells[key] = FactorialCell(mean=float(r["mean"]),
                                           sd=float(r["sd"]) if r.get("sd") else None)
    for key, tv in per_target.items():
        if key in cells:
            cells[key].per_target = tv
        else:
            cells[key] = FactorialCell(mean=float(np.mean(list(tv.values()))), per_target=tv)
    res = factorial_marginals(cells, [f.strip() for f in factors.split(",")], anchor,
                              n_boot=bootstrap)
    out = Path(out)
    outputs = [
        write_csv(out / "factorial_marginals.csv",
                  ["factor", "marginal", "ci_lo", "ci_hi"],
                  [[f, m.estimate, m.ci95[0] if m.ci95 else None, m.ci95[1] if m.ci95 else None]
                   for f, m in sorted(res.items())]),
    ]
    write_manifest(out, {"factors": factors, "anchor": anchor}, [], {"cells": cells_csv}, outputs)
    for f, m in sorted(res.items()):
        click.echo(f"{f}: {m.estimate:+.4f}" + (f" CI {m.ci95}" if m.ci95 else ""))


@main.command()
@click.option("--n-targets", default=65, show_default=True)
@click.option("--n-seeds", default=10, show_default=True)
@click.option("--n-pairs", default=4, show_default=True)
@click.option("--rho", default="0.10,0.20,0.30,0.40", show_default=True)
@click.option("--sigma-d", type=float, required=True)
@click.option("--alpha", default=0.05, show_default=True)
@click.option("--power", "power_level", default=0.80, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@handles_errors
def power(n_targets, n_seeds, n_pairs, rho, sigma_d, alpha, power_level, out):
    """ICC / VIF / minimum-detectable-effect grid for clustered designs."""
    rows = power_grid(n_targets, n_seeds, n_pairs, _parse_floats(rho), sigma_d, alpha, power_level)
    out = Path(out)
    outputs = [
        write_csv(out / "power_grid.csv", ["rho", "vif", "n_eff", "mde"],
                  [[r.rho, r.vif, r.n_eff, r.mde] for r in rows]),
    ]
    write_manifest(out, {"n_targets": n_targets, "n_seeds": n_seeds, "n_pairs": n_pairs,
                         "sigma_d": sigma_d, "alpha": alpha, "power": power_level},
                   [], {}, outputs)
    for r in rows:
        click.echo(f"rho={r.rho}: VIF {r.vif:.1f}, n_eff {r.n_eff:.1f}, MDE {r.mde:.4f}")


@main.command()
@add_options(source_options)
@add_options(run_options)
@click.option("--k-list", default="0,5,25", show_default=True)
@click.option("--selection", default="STRATIFIED_QUINTILE", show_default=True,
              type=click.Choice(["STRATIFIED_QUINTILE", "RANDOM"]))
@click.option("--out", type=click.Path(file_okay=False), required=True)
@handles_errors
def fewshot(data, synth_spec, fingerprints, scheme_name, ngram_min, ngram_max, width, config_file,
            seeds, workers, n_trees, min_samples_leaf, k_list, selection, out):
    """Few-shot per-target learning curves under the left-out-target protocol."""
    inputs, seed_list, model_cfg = _common(config_file, data, synth_spec, scheme_name, fingerprints,
                                           ngram_min, ngram_max, width, seeds, n_trees, min_samples_leaf)
    fs = loto_folds(inputs.cohort)
    res = evaluate_fewshot(inputs.X, inputs.cohort.labels, fs, inputs.cohort, model_cfg,
                           [int(v) for v in _parse_floats(k_list)], selection, seed_list, workers)
    out = Path(out)
    outputs = [
        write_csv(out / "fewshot_per_target.csv",
                  ["seed", "fold_key", "k", "selection", "n_support", "n_query",
                   "n_siblings_excluded", "auroc_fewshot", "auroc_base_on_query", "degenerate"],
                  [[r.seed, r.fold_key, r.k, r.selection, r.n_support, r.n_query,
                    r.n_siblings_excluded, r.auroc_fewshot, r.auroc_base_on_query, r.degenerate]
                   for r in res.rows]),
        write_csv(out / "fewshot_curve.csv",
                  ["k", "selection", "macro_mean", "macro_sd", "n_folds_degenerate",
                   "base_on_query_macro"],
                  [[p.k, p.selection, p.macro_mean, p.macro_sd, p.n_folds_degenerate,
                    p.base_on_query_macro] for p in res.curve]),
        write_csv(out / "fewshot_baseline_full_test.csv", ["seed", "macro_auroc"],
                  [[s, v] for s, v in res.baseline_full_test.items()]),
    ]
    write_manifest(out, {**inputs.config, "selection": selection, "k_list": k_list},
                   seed_list, inputs.files, outputs)
    for p in res.curve:
        click.echo(f"k={p.k}: macro {p.macro_mean:.4f} (sd {p.macro_sd:.4f})")


@main.command()
@add_options(source_options)
@add_options(run_options)
@click.option("--frac", default=0.2, show_default=True)
@click.option("--split-seed", default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@handles_errors
def calibrate(data, synth_spec, fingerprints, scheme_name, ngram_min, ngram_max, width, config_file,
              seeds, workers, n_trees, min_samples_leaf, frac, split_seed, out):
    """Target-disjoint post-hoc calibration under the left-out-target protocol."""
    inputs, seed_list, model_cfg = _common(config_file, data, synth_spec, scheme_name, fingerprints,
                                           ngram_min, ngram_max, width, seeds, n_trees, min_samples_leaf)
    fs = loto_folds(inputs.cohort)
    rows = run_calibration(inputs.X, inputs.cohort.labels, fs, inputs.cohort, model_cfg, seed_list,
                           frac=frac, split_seed=split_seed, workers=workers)
    out = Path(out)
    outputs = [
        write_csv(out / "calibration_report.csv",
                  ["fold_key", "seed", "n_test", "ece_raw", "ece_platt", "ece_temp",
                   "brier_raw", "brier_platt", "a", "b", "t", "auroc_raw", "auroc_platt", "flags"],
                  [[r.fold_key, r.seed, r.n_test, r.ece_raw, r.ece_platt, r.ece_temp,
                    r.brier_raw, r.brier_platt, r.a, r.b, r.t, r.auroc_raw, r.auroc_platt, r.flags]
                   for r in rows]),
    ]
    write_manifest(out, {**inputs.config, "frac": frac}, seed_list, inputs.files, outputs)
    valid = [r for r in rows if r.ece_platt is not None]
    if valid:
        click.echo(
            f"mean ECE raw {np.mean([r.ece_raw for r in valid]):.4f} -> "
            f"platt {np.mean([r.ece_platt for r in valid]):.4f}"
        )


@main.command()
@click.option("--synth-spec", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@handles_errors
def synth(synth_spec, out):
    """Generate a synthetic cohort and write it in the ingestion CSV schema."""
    spec_doc = _load_config_file(synth_spec)
    spec = spec_from_dict(spec_doc)
    cohort = generate_cohort(spec)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_cohort_csv(cohort, out / "dataset.csv")
    write_manifest(out, {"synth_spec": spec_doc}, [spec.seed], {"synth_spec": synth_spec},
                   [out / "dataset.csv"])
    click.echo(f"wrote {len(cohort)} records")


@main.command("leakage-audit")
@add_options(source_options)
@click.option("--protocols", default="LOTO,LOFO,CROSSLAB", show_default=True)
@click.option("--k", default=5, show_default=True)
@click.option("--split-seed", default=0, show_default=True)
@click.option("--cutoff", default=2023, show_default=True)
@click.option("--test-year", default=2024, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@handles_errors
def leakage_audit_cmd(data, synth_spec, fingerprints, scheme_name, ngram_min, ngram_max, width,
                      config_file, protocols, k, split_seed, cutoff, test_year, out):
    """Run the protocol-key leakage audit across fold constructions."""
    inputs, _, _ = _common(config_file, data, synth_spec, scheme_name, fingerprints,
                           ngram_min, ngram_max, width)
    results = {}
    fam = inputs.cohort.family_map()
    for proto in [p.strip().upper() for p in protocols.split(",") if p.strip()]:
        try:
            fs = _build_foldset(inputs, proto, k, split_seed, cutoff, test_year)
        except ColdsplitError as err:
            results[proto] = {"skipped": str(err)}
            continue
        results[proto] = {"n_folds": len(fs.folds),
                          "violations": leakage_audit(fs, inputs.cohort, family_map=fam)}
    out = Path(out)
    outputs = [write_json(out / "leakage_audit.json", results)]
    write_manifest(out, inputs.config, [], inputs.files, outputs)
    n_viol = sum(len(v.get("violations", [])) for v in results.values())
    click.echo(f"violations: {n_viol}")
    if n_viol:
        raise SystemExit(1)


if __name__ == "__main__":
    main()
