"""Exception hierarchy shared by all modules."""


class SigCtrlError(Exception):
    """Base class for all package errors."""


# paths
class PathError(SigCtrlError, ValueError):
    pass


class NonMonotoneTimes(PathError):
    pass


class NonFiniteValue(PathError):
    pass


class LengthMismatch(PathError):
    pass


class TooFewPointsRemain(PathError):
    pass


class OutOfRange(PathError):
    pass


class ZeroVariance(PathError):
    pass


class DegenerateBounds(PathError):
    pass


class NonPositiveForLog(PathError):
    pass


# numerics
class NumericError(SigCtrlError, ArithmeticError):
    pass


class NonFiniteState(NumericError):
    def __init__(self, step, path_index=None):
        self.step = step
        self.path_index = path_index
        where = f" (path {path_index})" if path_index is not None else ""
        super().__init__(f"state became non-finite at step {step}{where}")


class NonFiniteGradient(NumericError):
    pass


class DivergedTraining(NumericError):
    pass


class DivergedOptimization(NumericError):
    pass


class IntegrationDiverged(NumericError):
    pass


class SingularSystem(NumericError):
    pass


# kernels / estimators
class EmptyPath(SigCtrlError, ValueError):
    pass


class EmptySample(SigCtrlError, ValueError):
    pass


class SampleTooSmall(SigCtrlError, ValueError):
    pass


class SizeMismatch(SigCtrlError, ValueError):
    pass


class HorizonMismatch(SigCtrlError, ValueError):
    pass


class ShapeMismatch(SigCtrlError, ValueError):
    pass


class DegenerateConstantInput(SigCtrlError, ValueError):
    pass


# cli
class ConfigInvalid(SigCtrlError, ValueError):
    pass


class MissingArtifact(SigCtrlError, FileNotFoundError):
    pass
