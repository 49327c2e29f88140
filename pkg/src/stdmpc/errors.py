"""Exception hierarchy shared by all modules."""


class StdmpcError(Exception):
    pass


class ConfigError(StdmpcError, ValueError):
    """Configuration rejected; the message names the failed field or check."""


class DimensionError(ConfigError):
    pass


class ModelError(StdmpcError):
    pass


class SingularReferenceError(StdmpcError):
    pass


class DisturbanceBoundError(StdmpcError, ValueError):
    pass


class SynthesisError(StdmpcError):
    pass


class InfeasibleTighteningError(StdmpcError):
    def __init__(self, message, tau=None):
        super().__init__(message)
        self.tau = tau


class DivergedRolloutError(StdmpcError):
    pass


class InfeasibleProblemError(StdmpcError):
    """Raised by the OCP solver when no point satisfying the constraints was found.

    ``best`` holds the least-violating solution found (may be None) and
    ``most_violated`` a ``(name, amount)`` pair.
    """

    def __init__(self, message, most_violated=None, best=None):
        super().__init__(message)
        self.most_violated = most_violated
        self.best = best


class ColdStartError(StdmpcError, KeyError):
    pass


class VerificationError(StdmpcError):
    def __init__(self, check, context):
        super().__init__(f"verification check {check!r} violated: {context}")
        self.check = check
        self.context = context


class TraceError(StdmpcError, ValueError):
    """A trace directory is missing files or columns."""
