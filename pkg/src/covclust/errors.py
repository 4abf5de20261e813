"""Exception hierarchy.

Three families matter for the CLI exit codes: configuration problems (exit 2),
data/input problems (exit 3) and numerical failures (exit 4).
"""


class CovClustError(Exception):
    """Base class for all library errors."""


class ConfigError(CovClustError):
    """Bad configuration value or malformed config file."""


class ContractViolation(CovClustError):
    """An operation was called outside its documented preconditions."""


class ParseError(CovClustError):
    """Malformed input record."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class EmptyInputError(CovClustError):
    """Input stream contained no records."""


class InsufficientDataError(CovClustError):
    """Not enough usable rows for the requested operation."""


class SamplingFailureError(CovClustError):
    """Accept/reject sampling exhausted its attempts."""

    def __init__(self, message, best_correlation):
        super().__init__(message)
        self.best_correlation = best_correlation


class ConvergenceError(CovClustError):
    """Iterative solver hit its iteration cap before reaching tolerance.

    Carries the best iterate so callers can inspect or salvage it.
    """

    def __init__(self, message, beta=None, kkt_violation=None):
        super().__init__(message)
        self.beta = beta
        self.kkt_violation = kkt_violation


class DegenerateInstanceError(CovClustError):
    """Regression instance has no usable design columns."""


class ImportanceFailureError(CovClustError):
    """One or more per-row importance fits failed."""

    def __init__(self, message, failures):
        super().__init__(message)
        self.failures = failures


class EmptyClassSetError(CovClustError):
    """Class derivation produced no non-empty classes."""


class InfeasibleSelectionError(CovClustError):
    """No grid value satisfied the selection constraints.

    ``diagnostics`` holds the full per-candidate table that was scanned.
    """

    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class UndefinedImpurityError(CovClustError):
    """Impurity needs at least two classes/clusters (no pairs otherwise)."""


class NoPeersError(CovClustError):
    """Recommendation requested for a user in a singleton cluster."""


class NotReadyError(CovClustError):
    """A pipeline artifact required by this step has not been produced yet."""


CONFIG_ERRORS = (ConfigError,)
DATA_ERRORS = (
    ParseError,
    EmptyInputError,
    InsufficientDataError,
    ContractViolation,
    NoPeersError,
    NotReadyError,
)
NUMERICAL_ERRORS = (
    SamplingFailureError,
    ConvergenceError,
    DegenerateInstanceError,
    ImportanceFailureError,
    EmptyClassSetError,
    InfeasibleSelectionError,
    UndefinedImpurityError,
)
