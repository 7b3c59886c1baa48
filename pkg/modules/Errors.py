class WannierStarkError(Exception):
    """Base class for every failure raised by the simulator."""


class ConfigError(WannierStarkError, ValueError):
    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        where = []
        if key:
            where.append(f"key '{key}'")
        if line:
            where.append(f"line {line}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")


class GridMismatchError(WannierStarkError, ValueError):
    pass


class EigenSolverError(WannierStarkError):
    def __init__(self, message, residual=None):
        self.residual = residual
        if residual is not None:
            message = f"{message} (max residual {residual:.3e})"
        super().__init__(message)


class LadderError(WannierStarkError):
    pass


class AmbiguousAssignmentError(LadderError):
    pass


class MissingWellError(LadderError):
    pass


class DegenerateLobeError(LadderError):
    pass


class CouplingSpreadError(LadderError):
    pass


class SupportError(WannierStarkError, ValueError):
    pass


class FrameError(WannierStarkError, ValueError):
    pass


class NormDriftError(WannierStarkError):
    pass


class WallContactError(WannierStarkError):
    pass


class TruncationError(WannierStarkError, ValueError):
    pass


class NoResonanceError(WannierStarkError):
    pass


class QuadratureError(WannierStarkError):
    pass


class FitError(WannierStarkError):
    pass


class DisjointTimeRangeError(WannierStarkError, ValueError):
    pass


class AcceptanceError(WannierStarkError):
    pass
