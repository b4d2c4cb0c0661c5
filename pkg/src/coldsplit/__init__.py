"""Cold-split evaluation and variance decomposition toolkit.

A library + CLI for benchmarking activity predictors under leakage-free
evaluation protocols (leave-one-target-out, leave-one-family-out, temporal,
within-target cross-lab, similarity-resolution sweeps) and for decomposing
the random-split-to-cold-split performance gap into measurement-variance
components: ANOVA/bootstrap variance shares, selection-bias order statistics,
label-noise calibration, factorial marginals, power grids, post-hoc
probability calibration and few-shot per-target recovery.
"""

__version__ = "0.1.0"

from .errors import ColdsplitError

__all__ = ["ColdsplitError", "__version__"]
