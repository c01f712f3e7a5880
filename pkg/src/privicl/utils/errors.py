"""Exception hierarchy for the PrivICL toolkit.

All errors raised on purpose by the package derive from PrivICLError, so the CLI
can map them onto exit codes without catching unrelated failures.
"""


class PrivICLError(Exception):
    """Base class for every error raised deliberately by PrivICL."""


class EmptyHistogramError(PrivICLError, ValueError):
    """Raised when an aggregation has no responses to aggregate."""


class InfeasibleSelectionError(PrivICLError, ValueError):
    """Raised when every candidate of a selection has utility -inf."""


class PrivacyAccountingError(PrivICLError, ValueError):
    """Raised when a privacy guarantee cannot be computed or reached."""


class BudgetExhaustedError(PrivICLError):
    """Raised when the next mechanism invocation would exceed the privacy budget.

    Attributes:
        spent: Epsilon already consumed by the ledger.
        projected: Epsilon the ledger would reach with the refused invocation.
    """

    def __init__(self, spent: float, projected: float, target: float) -> None:
        super().__init__(
            f"Privacy budget exhausted: spent eps={spent:.4f}, next query would "
            f"reach eps={projected:.4f} > target {target:.4f}"
        )
        self.spent = spent
        self.projected = projected
        self.target = target


class BackendError(PrivICLError, RuntimeError):
    """Raised when an LLM backend request fails for good.

    Attributes:
        attempts: Number of attempts made before giving up.
    """

    def __init__(self, message: str, attempts: int = 1) -> None:
        super().__init__(f"{message} (after {attempts} attempt(s))")
        self.attempts = attempts


class ConfigError(PrivICLError, ValueError):
    """Raised for invalid or inconsistent run configuration."""
