"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto the
documented process exit codes without a lookup table.
"""


class HTQError(Exception):
    exit_code = 3

    def to_json(self):
        return {"error": type(self).__name__, "message": str(self)}


class InputError(HTQError):
    """Bad input data or arguments (exit code 3)."""

    exit_code = 3


class NumericalError(HTQError):
    """A numerical procedure failed (exit code 4)."""

    exit_code = 4


# tail-model
class NoTailSamples(InputError):
    pass


class InvalidGmin(InputError):
    pass


class DegenerateSamples(InputError):
    pass


class OutOfSupport(InputError):
    pass


class InvalidTail(InputError):
    pass


# quant-core
class InvalidAlpha(InputError):
    pass


class OddSplit(InputError):
    pass


class OutOfRange(InputError):
    pass


class IndexOutOfRange(InputError):
    pass


class IndexTooLarge(InputError):
    pass


class TruncatedPayload(InputError):
    pass


class SupportMismatch(InputError):
    pass


class LengthMismatch(InputError):
    pass


class CorruptMessage(InputError):
    pass


# param-solver
class InvalidK(InputError):
    pass


class BudgetTooSmall(InputError):
    pass


class GammaOutOfRange(InputError):
    pass


class InvalidEta(InputError):
    pass


class NoConvergence(NumericalError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class AlphaBelowGmin(NumericalError):
    pass


# dsgd-sim
class DimensionMismatch(InputError):
    pass


class IncompatibleConfigs(InputError):
    pass


class SimulationError(HTQError):
    """Wraps a module error with round/client context."""

    def __init__(self, message, cause):
        super().__init__(message)
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 4)
