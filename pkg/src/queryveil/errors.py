"""Exception types raised across the toolkit."""


class QueryVeilError(Exception):
    """Base class for all toolkit errors."""


class InvalidResolutionError(QueryVeilError):
    """Requested resampling resolution is below the supported minimum."""


class InvalidInputError(QueryVeilError):
    """Input image is unusable for the requested operation (e.g. too small
    for the backend so the output tensor would be empty)."""


class UndefinedDirectionError(QueryVeilError):
    """A vector that must be l2-normalized has zero norm."""


class DegenerateTargetError(QueryVeilError):
    """Target activation tensor is all zero, so max-normalization is undefined."""


class InsufficientDataError(QueryVeilError):
    """Not enough samples to learn a transform."""


class EmptyRelevantSetError(QueryVeilError):
    """A query has no relevant database images; it must be skipped, not scored."""


class GradientError(QueryVeilError):
    """Gradient turned NaN/Inf during optimization; carries diagnostics."""


class ConfigurationError(QueryVeilError):
    """Missing or inconsistent configuration / artifacts, detected before compute."""
