"""Exception types raised by the estimation routines."""


class MqreError(Exception):
    """Base class for errors raised by this package."""


class SingularDesignError(MqreError):
    """Design matrix is rank deficient."""


class StepSingularError(MqreError):
    """The Newton step matrix for the fixed effects is singular."""


class DegenerateDesignError(MqreError):
    """Variance-component update system is singular (degenerate grouping)."""


class NumericalError(MqreError):
    """A cluster produced non-finite intermediate quantities."""


class InferenceUnavailableError(MqreError):
    """Sandwich covariance could not be formed (singular score Jacobian)."""


class SimulationError(MqreError):
    """Monte Carlo run failed (too many per-replicate fit failures)."""


class InputError(MqreError):
    """Malformed input data or schema mismatch (CLI exit status 2)."""
