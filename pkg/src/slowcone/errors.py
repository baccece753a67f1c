"""Exception types shared across the package."""


class SlowconeError(Exception):
    """Base class for package-specific failures."""


class SiteBudgetError(SlowconeError):
    """A requested box or Fock sector exceeds the configured size budget."""


class ConvergenceError(SlowconeError):
    """An iterative propagator failed to reach its tolerance.

    Carries the achieved residual and the step at which the budget ran out.
    """

    def __init__(self, message, residual=None, step=None):
        super().__init__(message)
        self.residual = residual
        self.step = step


class ConservationError(SlowconeError):
    """A conserved quantity drifted beyond tolerance during integration."""

    def __init__(self, message, step=None, drift=None):
        super().__init__(message)
        self.step = step
        self.drift = drift


class ConfigError(SlowconeError):
    """Invalid experiment configuration; collects per-path messages."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
