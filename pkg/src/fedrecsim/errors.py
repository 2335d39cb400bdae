"""Exception hierarchy shared across the simulator."""


class FedRecSimError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(FedRecSimError):
    """Invalid configuration value(s).

    ``violations`` collects every problem found so callers can report all of
    them at once instead of failing on the first.
    """

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class ParseError(FedRecSimError):
    """Malformed input file. Carries file, line and column context."""

    def __init__(self, path, line, column, reason):
        self.path = str(path)
        self.line = line
        self.column = column
        self.reason = reason
        super().__init__(f"{self.path}:{line}:{column}: {reason}")


class CoverageError(FedRecSimError):
    """Public and private user files do not cover the same user ids."""


class UniquenessError(FedRecSimError):
    """Duplicate identifier where uniqueness is required."""


class LookupError_(FedRecSimError):
    """Unknown user or item id."""


class ShapeError(FedRecSimError):
    """Vector or matrix dimension mismatch."""


class DivergenceError(FedRecSimError):
    """Training produced a non-finite parameter or loss."""


class EmptyBatchError(FedRecSimError):
    """Gradient requested for an empty batch."""


class EmptyCatalogError(FedRecSimError):
    """Operation requires at least one catalog item."""


class NoParticipantsError(FedRecSimError):
    """Aggregation called with no client updates."""


class RejectedUpdateError(FedRecSimError):
    """A client update was rejected (non-finite values). Names the client."""

    def __init__(self, client_id, reason):
        self.client_id = client_id
        super().__init__(f"update from client {client_id} rejected: {reason}")


class PrivacyViolationError(FedRecSimError):
    """A message failed the privacy audit; the experiment must abort."""


class IncomparableReportsError(FedRecSimError):
    """Metric reports computed on different evaluation splits."""


class EmptyEvaluationError(FedRecSimError):
    """No user qualifies for the evaluation split."""
