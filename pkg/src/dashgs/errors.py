"""Exception hierarchy. Every error carries a short machine-readable ``code``."""


class DashError(Exception):
    code = "error"

    def __init__(self, message=None):
        super().__init__(message or self.code.replace("_", " "))


class InvalidParameterError(DashError, ValueError):
    code = "invalid_parameter"


class ShapeMismatchError(DashError, ValueError):
    code = "shape_mismatch"


class EmptyDatasetError(DashError, ValueError):
    code = "empty_dataset"

    def __init__(self, message="empty dataset"):
        super().__init__(message)


class DimensionMismatchError(DashError, ValueError):
    code = "dimension_mismatch"

    def __init__(self, message="dimension mismatch"):
        super().__init__(message)


class MalformedHeaderError(DashError, ValueError):
    code = "malformed_header"


class VersionMismatchError(DashError, ValueError):
    code = "version_mismatch"


class NotACheckpointError(DashError, ValueError):
    code = "not_a_checkpoint"

    def __init__(self, message="not a checkpoint"):
        super().__init__(message)


class UnexpectedEOFError(DashError, EOFError):
    code = "unexpected_eof"

    def __init__(self, message="unexpected EOF"):
        super().__init__(message)


class TrajectoryError(DashError, ValueError):
    code = "trajectory_out_of_bounds"


class NonFiniteLossError(DashError, FloatingPointError):
    code = "non_finite_loss"
