"""Error types raised by the expertsim modules.

Everything derives from ExpertSimError so the management commands can map
domain failures to exit code 3 in one place.
"""


class ExpertSimError(ValueError):
    """Base class for domain errors."""


class ConfigError(ExpertSimError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__('invalid MoE config: ' + '; '.join(self.violations))


class TraceFormatError(ExpertSimError):
    def __init__(self, lineno, message):
        self.lineno = lineno
        super().__init__(f'trace line {lineno}: {message}')


class DigestMismatchError(ExpertSimError):
    def __init__(self, what, expected, found):
        self.expected = expected
        self.found = found
        super().__init__(f'{what} digest mismatch: expected {expected}, found {found}')


class QuantizationError(ExpertSimError):
    pass


class PlanError(ExpertSimError):
    pass


class ProfileError(ExpertSimError):
    pass


class CapacityError(ExpertSimError):
    pass


class EvictionDeadlock(CapacityError):
    pass


class BudgetInfeasible(ExpertSimError):
    pass


class GenerationInfeasible(ExpertSimError):
    pass
