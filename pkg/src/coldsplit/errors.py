"""Error types shared across the package.

Every fatal condition raises a ColdsplitError subclass carrying a stable
machine-readable ``code`` so the CLI can emit structured error documents.
"""

from __future__ import annotations


class ColdsplitError(Exception):
    """Base class for all package errors."""

    code = "error"

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.context = context

    def to_dict(self) -> dict:
        return {"error": self.code, "message": str(self), **self.context}


class IngestError(ColdsplitError):
    code = "ingest"


class SchemaError(ColdsplitError):
    code = "schema"


class FeatureError(ColdsplitError):
    code = "features"


class SingleClassError(ColdsplitError):
    """Training labels contain a single class; degenerate folds are
    reported by callers, never trained."""

    code = "single_class"


class SplitError(ColdsplitError):
    code = "splits"


class SpectraError(SplitError):
    """All folds dropped by a similarity filter; carries the drop report."""

    code = "spectra_all_dropped"

    def __init__(self, message: str, report: list, **context):
        super().__init__(message, **context)
        self.report = report


class MetricError(ColdsplitError):
    code = "metrics"


class StatsError(ColdsplitError):
    code = "stats"


class CalibrationError(ColdsplitError):
    code = "calibration"


class PipelineError(ColdsplitError):
    code = "pipeline"


class ConfigError(ColdsplitError):
    code = "config"
