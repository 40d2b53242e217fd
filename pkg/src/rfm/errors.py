"""Exception hierarchy shared by every module.

Each class carries an ``exit_code`` used by the command line front end.
"""


class RFMError(Exception):
    exit_code = 1


class ContractViolation(RFMError, ValueError):
    """An input broke a documented precondition (off-manifold point, non-tangent vector, ...)."""


class ConfigError(RFMError, ValueError):
    exit_code = 1


class NumericError(RFMError, ArithmeticError):
    exit_code = 3


class CutLocusError(NumericError):
    """The logarithm map is multivalued at the requested pair."""


class ProjectionError(NumericError):
    pass


class DegenerateGradientError(NumericError):
    """A premetric gradient vanished at a point distinct from the target."""


class FlowStallError(NumericError):
    def __init__(self, message, t_fail=None, x_fail=None):
        super().__init__(message)
        self.t_fail = t_fail
        self.x_fail = x_fail


class SolverError(NumericError):
    pass


class MeshError(RFMError, ValueError):
    exit_code = 2


class MeshParseError(MeshError):
    code = "parse"


class NonManifoldEdgeError(MeshError):
    code = "non-manifold-edge"


class DegenerateFaceError(MeshError):
    code = "degenerate-face"


class CheckpointMismatch(RFMError):
    exit_code = 6


class NaNLossError(NumericError):
    exit_code = 5


class IOFailure(RFMError):
    exit_code = 4


class UndefinedFieldError(NumericError):
    """The conditional field was requested at its own target point."""


class DataParseError(RFMError, ValueError):
    """A data file row could not be parsed; the message carries the line number."""

    exit_code = 2
