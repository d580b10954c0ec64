"""Exception hierarchy.

Validation problems (bad files, bad config, inconsistent rows) and numeric
problems (failed solves) are kept on separate branches so callers, in
particular the command line interface, can map them to distinct exit codes.
"""


class IrrvisError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(IrrvisError):
    """Invalid input: file structure, schema, configuration or data rows."""


class NumericError(IrrvisError):
    """A numeric routine failed in a way that is not a usage error."""


class ConvergenceError(NumericError):
    """An iterative solver exhausted its iteration budget."""


class SeparationError(NumericError):
    """Monotone partial likelihood: a coefficient diverges without bound."""


class RankDeficiencyError(NumericError):
    """Design matrix (or a derived system) is numerically rank deficient."""


class PipelineError(NumericError):
    """Failure inside a multi-stage analysis, tagged with stage and phi.

    The original exception is kept as ``__cause__``.
    """

    def __init__(self, stage, phi, cause):
        self.stage = stage
        self.phi = phi
        super().__init__(f"stage {stage!r} failed at phi={phi:g}: {cause}")
