# errors.py
# Exception hierarchy shared by every chronoweft module.
#
# ValidationError -> bad input, config or usage (CLI exit code 2)
# NumericalError  -> the numbers went wrong   (CLI exit code 3)


class ChronoweftError(Exception):
    """Base class for all chronoweft errors"""


# ------------------------
# Validation failures
# ------------------------
class ValidationError(ChronoweftError):
    exit_code = 2


class ShapeError(ValidationError):
    def __init__(self, op, left, right):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        super().__init__(f"{op}: incompatible shapes {self.left} and {self.right}")


class SequenceLengthError(ValidationError):
    def __init__(self, length, max_len):
        self.length = length
        self.max_len = max_len
        super().__init__(f"sequence length {length} exceeds max_len {max_len}")


class ConfigError(ValidationError):
    pass


class LeakageError(ValidationError):
    def __init__(self, systems):
        self.systems = sorted(systems)
        super().__init__(f"held-out systems present in training pool: {', '.join(self.systems)}")


class WindowMismatchError(ValidationError):
    def __init__(self, n_pred, n_true):
        super().__init__(f"trajectory windows differ in length: {n_pred} vs {n_true}")


class UndefinedMetricError(ValidationError):
    pass


class InsufficientDataError(ValidationError):
    pass


class FormatError(ValidationError):
    pass


# ------------------------
# Numerical failures
# ------------------------
class NumericalError(ChronoweftError):
    exit_code = 3


class IntegrationError(NumericalError):
    def __init__(self, state, t):
        self.state = state
        self.t = t
        super().__init__(f"non-finite vector field at t={t}, state={list(state)}")


class DivergenceError(NumericalError):
    def __init__(self, system, step):
        self.system = system
        self.step = step
        super().__init__(f"{system} diverged at step {step}")


class DegenerateNormalizationError(NumericalError):
    def __init__(self, dims):
        self.dims = list(dims)
        super().__init__(f"constant dimension(s) {self.dims}: cannot min-max normalize")


class OptimizerError(NumericalError):
    def __init__(self, param):
        self.param = param
        super().__init__(f"non-finite gradient for parameter '{param}'")


class TrainingAbortedError(NumericalError):
    def __init__(self, epoch, step, params=None):
        self.epoch = epoch
        self.step = step
        # last parameters that produced a finite loss
        self.params = params
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}")


class RegularizationError(NumericalError):
    pass


class DegenerateReservoirError(NumericalError):
    pass


class SearchExhaustedError(NumericalError):
    def __init__(self, trials):
        self.trials = trials
        super().__init__(f"all {trials} trials failed")
