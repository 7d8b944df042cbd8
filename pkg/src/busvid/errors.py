"""Exception hierarchy shared by all pipeline stages.

Every error raised on purpose by this package derives from PipelineError so
the CLI can map failures to a single machine-parsable line and exit code.
"""


class PipelineError(Exception):
    """Base class for all busvid errors."""


class ParameterError(PipelineError):
    """Invalid numeric parameter or configuration value."""


class GeometryError(PipelineError):
    """Region geometry is invalid (out of frame, overlapping, missing tags)."""


class ShapeError(PipelineError):
    """Array arguments have inconsistent or unsupported shapes."""


class ManifestError(PipelineError):
    """Case manifest is missing or malformed."""


class FrameCountError(PipelineError):
    """Frame files on disk disagree with the manifest."""


class NoEnhancementError(PipelineError):
    """The time-intensity curve never crosses the gradient threshold."""


class UndefinedMetricError(PipelineError):
    """A metric is undefined for the given inputs (e.g. AUC on one class)."""


class ConfigError(PipelineError):
    """Bad key=value configuration file."""


class CheckpointError(PipelineError):
    """Checkpoint file is missing, truncated, or malformed."""


class DivergenceError(PipelineError):
    """Training produced a non-finite loss."""
