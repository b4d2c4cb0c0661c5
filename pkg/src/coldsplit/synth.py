"""Synthetic cohorts and observation tables with planted variance components.

These generators are the ground-truth oracle for every property the real data
cannot verify at desk scale: planted target/laboratory/replicate variance
components, compound reuse across targets, within-paper replicate
measurements, and a controllable structure-activity signal that the built-in
n-gram featurizer can see.

Construction of a compound's structure string: thirteen 3-character blocks
(40 chars with a pad).  The leading blocks carry the owning target's tag
tokens; each signal token independently overwrites a random non-tag block
with probability 1/2.  The chemistry score of a compound is the sum of the
weights of the signal tokens present in the final string, so the activity
signal is exactly the kind of sparse binary evidence the fingerprint carries.

The latent measurement is

    log10(dc50) = center - score(compound) * [1 + jitter(target, token)]
                  + offset(target) + offset(target, paper) + noise

and the degradation perchistogram is a monotone transform of the same latent
with independent noise at a configurable correlation.  Labels follow the
active binarisation scheme.  Everything is a pure function of the spec:
identical specs yield bit-identical cohorts.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field

import numpy as np

from .dataset import DEFAULT_SCHEME, BinarisationScheme, Cohort, Record
from .errors import SchemaError

_ALPHABET = string.ascii_uppercase
_BLOCK = 3
_STRUCTURE_BLOCKS = 13  # 13 * 3 + 1 pad char = 40


@dataclass(frozen=True)
class SynthSpec:
    n_targets: int = 20
    papers_per_target: int | tuple = 3
    compounds_per_paper: int | tuple = 30
    sigma_target: float = 0.5
    sigma_lab: float = 0.5
    sigma_noise: float = 0.3
    feature_dim: int = 256
    signal_bits: int = 8
    compound_reuse_rate: float = 0.0
    base_year: int = 2020
    seed: int = 0
    # Generator shape knobs beyond the core variance components.
    signal_amplitude: float = 0.6
    target_weight_jitter: float = 0.0  # per-(target, token) response heterogeneity
    target_tag_tokens: int = 2
    pool_factor: float = 1.25  # target compound pool size / compounds_per_paper
    replicate_rate: float = 0.0  # fraction of a paper's compounds measured twice
    dmax_correlation: float = 0.7
    dc50_center_log10: float = 3.0  # log10 nM; 3.0 = threshold of the default scheme
    year_span: int = 3
    scheme: BinarisationScheme = field(default=DEFAULT_SCHEME)

    def __post_init__(self):
        for name in ("sigma_target", "sigma_lab", "sigma_noise"):
            if getattr(self, name) < 0:
                raise SchemaError(f"{name} must be >= 0")
        if not (0.0 <= self.compound_reuse_rate <= 1.0):
            raise SchemaError("compound_reuse_rate must be in [0, 1]")
        if not (0.0 <= self.replicate_rate <= 1.0):
            raise SchemaError("replicate_rate must be in [0, 1]")
        if self.n_targets < 1 or self.signal_bits < 1:
            raise SchemaError("n_targets and signal_bits must be >= 1")


def _as_range(value, rng) -> int:
    if isinstance(value, tuple):
        lo, hi = value
        return int(rng.integers(lo, hi + 1))
    return int(value)


def _tokens(rng, n: int, taken: set) -> list[str]:
    out = []
    while len(out) < n:
        tok = "".join(_ALPHABET[i] for i in rng.integers(0, len(_ALPHABET), size=_BLOCK))
        if tok not in taken:
            taken.add(tok)
            out.append(tok)
    return out


@dataclass
class _Compound:
    compound_id: str
    structure: str
    score: float  # token-weight sum, before target jitter
    tokens_present: tuple


def generate_cohort(spec: SynthSpec) -> Cohort:
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    taken: set = set()
    signal_tokens = _tokens(rng, spec.signal_bits, taken)
    weights = {
        tok: spec.signal_amplitude * float(rng.choice([-1.0, 1.0])) * float(rng.uniform(0.75, 1.25))
        for tok in signal_tokens
    }
    tags = [_tokens(rng, spec.target_tag_tokens, taken) for _ in range(spec.n_targets)]

    # Per-(target, token) response multipliers; 1.0 everywhere at zero jitter.
    jitter = {
        (t, tok): 1.0 + spec.target_weight_jitter * float(rng.standard_normal())
        for t in range(spec.n_targets)
        for tok in signal_tokens
    }

    def make_compound(cid: int, tag_tokens: list[str]) -> _Compound:
        blocks = list(tag_tokens)
        while len(blocks) < _STRUCTURE_BLOCKS:
            blocks.append(
                "".join(_ALPHABET[i] for i in rng.integers(0, len(_ALPHABET), size=_BLOCK))
            )
        free = list(range(len(tag_tokens), _STRUCTURE_BLOCKS))
        for tok in signal_tokens:
            if rng.random() < 0.5:
                blocks[int(rng.choice(free))] = tok
        pad = _ALPHABET[int(rng.integers(0, len(_ALPHABET)))]
        structure = "".join(blocks) + pad
        present = tuple(tok for tok in signal_tokens if tok in structure)
        score = float(sum(weights[tok] for tok in present))
        return _Compound(f"C{cid:06d}", structure, score, present)

    # Target compound pools with optional cross-target reuse.
    cpp_hi = (
        spec.compounds_per_paper[1]
        if isinstance(spec.compounds_per_paper, tuple)
        else spec.compounds_per_paper
    )
    pool_size = max(int(cpp_hi), int(round(spec.pool_factor * cpp_hi)))
    next_cid = 0
    pools: list[list[_Compound]] = []
    for t in range(spec.n_targets):
        pool: list[_Compound] = []
        for _ in range(pool_size):
            reused = None
            if t > 0 and spec.compound_reuse_rate > 0 and rng.random() < spec.compound_reuse_rate:
                src = int(rng.integers(0, t))
                reused = pools[src][int(rng.integers(0, len(pools[src])))]
            if reused is not None:
                pool.append(reused)
            else:
                pool.append(make_compound(next_cid, tags[t]))
                next_cid += 1
        pools.append(pool)

    sigma_g = float(
        np.sqrt(sum(0.25 * w * w for w in weights.values()))
    )  # inclusion prob 1/2 per token
    latent_scale = float(np.sqrt(sigma_g**2 + spec.sigma_target**2 + spec.sigma_lab**2)) or 1.0
    mean_score = 0.5 * sum(weights.values())

    records: list[Record] = []
    for t in range(spec.n_targets):
        target_id = f"T{t:03d}"
        family_id = f"FAM{t // 3:03d}"
        a_t = float(rng.normal(0.0, spec.sigma_target))
        n_papers = _as_range(spec.papers_per_target, rng)
        for j in range(n_papers):
            doi = f"doi:10.1000/{target_id}.{j}"
            year = spec.base_year + (j % max(spec.year_span, 1))
            b_tp = float(rng.normal(0.0, spec.sigma_lab))
            cpp = _as_range(spec.compounds_per_paper, rng)
            cpp = min(cpp, len(pools[t]))
            chosen_idx = rng.choice(len(pools[t]), size=cpp, replace=False)
            chosen = [pools[t][int(i)] for i in chosen_idx]
            n_rep = int(np.floor(spec.replicate_rate * cpp))
            reps = (
                [chosen[int(i)] for i in rng.choice(cpp, size=n_rep, replace=False)]
                if n_rep
                else []
            )
            for comp in list(chosen) + reps:
                eff_score = sum(
                    weights[tok] * jitter[(t, tok)] for tok in comp.tokens_present
                )
                core = -(eff_score - mean_score) + a_t + b_tp
                eps = float(rng.normal(0.0, spec.sigma_noise))
                log_dc50 = spec.dc50_center_log10 + core + eps
                z = spec.dmax_correlation * (-core / latent_scale) + float(
                    np.sqrt(max(1.0 - spec.dmax_correlation**2, 0.0)) * rng.standard_normal()
                )
                dmax = float(100.0 / (1.0 + np.exp(-1.7 * z)))
                dc50 = float(10.0**log_dc50)
                records.append(
                    Record(
                        compound_id=comp.compound_id,
                        structure=comp.structure,
                        target_id=target_id,
                        family_id=family_id,
                        e3=["CRBN", "VHL", "OTHER"][int(rng.choice(3, p=[0.7, 0.28, 0.02]))],
                        doi=doi,
                        year=year,
                        dc50_nM=dc50,
                        dmax_pct=dmax,
                        cell_line=f"CL{int(rng.integers(1, 4))}",
                        label=spec.scheme.binarise(dc50, dmax),
                    )
                )
    return Cohort(records)


# ------------------------------------------------- observation tables


@dataclass
class ObservationTable:
    group: np.ndarray  # target id per observation
    subgroup: np.ndarray  # paper id per observation (nested under group)
    rep: np.ndarray
    y: np.ndarray


def generate_observation_table(
    n_targets: int,
    papers_per_target,
    reps: int,
    mu: float,
    sigma_target: float,
    sigma_lab: float,
    sigma_eps: float,
    seed: int,
) -> ObservationTable:
    """Direct nested-design oracle: y = mu + a_t + b_(p|t) + eps.

    Expected mean squares for the balanced design (papers b, reps r):
      E[MS_target]   = sigma_eps^2 + r * sigma_lab^2 + r * b * sigma_target^2
      E[MS_paper|t]  = sigma_eps^2 + r * sigma_lab^2
      E[MS_residual] = sigma_eps^2
    which is the algebra the recovery tests check against.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    groups, subgroups, rep_ids, ys = [], [], [], []
    any_multi_rep = False
    for t in range(n_targets):
        a = rng.normal(0.0, sigma_target)
        n_p = _as_range(papers_per_target, rng)
        for p in range(n_p):
            b = rng.normal(0.0, sigma_lab)
            if reps >= 2:
                any_multi_rep = True
            for r in range(reps):
                groups.append(f"T{t:03d}")
                subgroups.append(f"T{t:03d}/P{p:02d}")
                rep_ids.append(r)
                ys.append(mu + a + b + rng.normal(0.0, sigma_eps))
    if not any_multi_rep:
        raise SchemaError("need reps >= 2 somewhere")
    return ObservationTable(
        group=np.asarray(groups, dtype=object),
        subgroup=np.asarray(subgroups, dtype=object),
        rep=np.asarray(rep_ids, dtype=np.int64),
        y=np.asarray(ys, dtype=np.float64),
    )


def overconfident_scores(
    n: int, seed: int, distortion: float = 3.0
) -> tuple[np.ndarray, np.ndarray]:
    """Scores from a systematically overconfident model.

    Reported probability p is drawn with mass toward the extremes; the true
    event probability is pulled back toward 1/2 by an odd power law,
    pi = 1/2 + 1/2 * sign(2p-1) * |2p-1|^distortion, so raw outputs are
    overconfident everywhere while remaining rank-consistent with the truth.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    p = rng.beta(0.8, 0.8, size=n)
    p = np.clip(p, 0.01, 0.99)
    u = 2.0 * p - 1.0
    pi = 0.5 + 0.5 * np.sign(u) * np.abs(u) ** distortion
    labels = rng.random(n) < pi
    return p, labels


# ----------------------------------------------------- tuned recipes
# Frozen generator settings used by the verification suite; each plants the
# variance structure its consumer is probing for.


def cascade_recipe(seed: int) -> SynthSpec:
    """Planted laboratory variance with heavy within-target compound sharing,
    so random-CV, cross-lab and left-out-target evaluation separate cleanly."""
    return SynthSpec(
        n_targets=20,
        papers_per_target=3,
        compounds_per_paper=30,
        sigma_target=0.55,
        sigma_lab=0.55,
        sigma_noise=0.25,
        feature_dim=256,
        signal_bits=8,
        signal_amplitude=0.35,
        target_tag_tokens=2,
        pool_factor=1.2,
        replicate_rate=0.3,
        compound_reuse_rate=0.0,
        seed=seed,
    )


def fewshot_recipe(seed: int) -> SynthSpec:
    """Planted lab offsets plus per-target response heterogeneity: the
    structure-activity mapping differs by target, which is exactly what a
    handful of in-target measurements can teach a retrained model."""
    return SynthSpec(
        n_targets=12,
        papers_per_target=3,
        compounds_per_paper=40,
        sigma_target=0.45,
        sigma_lab=0.45,
        sigma_noise=0.25,
        feature_dim=256,
        signal_bits=8,
        signal_amplitude=0.8,
        target_weight_jitter=0.9,
        target_tag_tokens=2,
        pool_factor=1.5,
        replicate_rate=0.0,
        compound_reuse_rate=0.0,
        seed=seed,
    )


def dedup_recipe(seed: int) -> SynthSpec:
    """Cross-target compound reuse with labels correlated through the shared
    chemistry score, so training twins of test compounds are informative and
    removing them costs measurable performance."""
    return SynthSpec(
        n_targets=15,
        papers_per_target=2,
        compounds_per_paper=40,
        sigma_target=0.35,
        sigma_lab=0.35,
        sigma_noise=0.45,
        feature_dim=256,
        signal_bits=8,
        signal_amplitude=0.5,
        target_tag_tokens=1,
        pool_factor=1.0,
        compound_reuse_rate=0.2,
        seed=seed,
    )


def null_recipe(seed: int) -> SynthSpec:
    """Zero planted target/lab variance; the null case for decompositions."""
    return SynthSpec(sigma_target=0.0, sigma_lab=0.0, seed=seed)


def spec_from_dict(d: dict) -> SynthSpec:
    d = dict(d)
    if "scheme" in d and isinstance(d["scheme"], str):
        from .dataset import SCHEMES

        d["scheme"] = SCHEMES[d["scheme"]]
    for key in ("papers_per_target", "compounds_per_paper"):
        if key in d and isinstance(d[key], list):
            d[key] = tuple(d[key])
    return SynthSpec(**d)
