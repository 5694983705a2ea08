"""Exception hierarchy shared across the pipeline."""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(PipelineError):
    """Tensor or array extents violate an operation's contract."""


class NumericError(PipelineError):
    """A computation produced NaN/Inf or otherwise left the valid domain."""


class DomainError(PipelineError):
    """An input value lies outside the documented domain."""


class ContractError(PipelineError):
    """A configuration or call-site invariant was violated."""


class IngestError(PipelineError):
    """A data file could not be read or failed validation."""


class FormatError(PipelineError):
    """A binary payload does not match its declared format."""


class ClusteringError(PipelineError):
    """Anchor clustering received degenerate input or lost monotonicity."""


class GenerationError(PipelineError):
    """Synthetic corpus generation could not satisfy its constraints."""


class EvaluationError(PipelineError):
    """Evaluation was asked to score an empty or inconsistent corpus."""
