from typing import List, Optional


class SpilloverError(Exception):
    """Base class for every error raised by the estimation toolkit"""


class EdgeListError(SpilloverError, ValueError):
    """Malformed edge-list file: parse failure, duplicate edge or self-loop"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DesignFileError(SpilloverError, ValueError):
    """Malformed design or potential-outcome CSV"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(SpilloverError, ValueError):
    """Invalid fit, prior or simulation configuration"""


class EmptyConditionError(SpilloverError, ValueError):
    """An exposure condition has no included subjects"""

    def __init__(self, conditions: List[str]):
        self.conditions = conditions
        super().__init__(f"no included subjects observed in: {', '.join(conditions)}")


class ZeroProbabilityError(SpilloverError, ValueError):
    """A subject sits in a condition it had zero probability of reaching"""


class LikelihoodUnderflowError(SpilloverError, ArithmeticError):
    """A subject's mixture mass underflowed to zero"""

    def __init__(self, subject: int, detail: str = ""):
        self.subject = subject
        message = f"mixture mass underflowed for subject {subject}"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)


class FitFailedError(SpilloverError, RuntimeError):
    """Every EM start failed"""

    def __init__(self, failures: List[str]):
        self.failures = failures
        joined = "; ".join(f"start {i}: {msg}" for i, msg in enumerate(failures))
        super().__init__(f"all {len(failures)} EM starts failed ({joined})")


class BootstrapFailedError(SpilloverError, RuntimeError):
    """Too many bootstrap replicates failed to refit"""


class FitRejectedError(SpilloverError, RuntimeError):
    """A fit failed its diagnostics under strict mode"""


class SimulationFailedError(SpilloverError, RuntimeError):
    """Estimation failures in a simulation run under strict mode"""
