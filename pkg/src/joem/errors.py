"""Exception hierarchy shared by every joem module."""


class JoemError(Exception):
    """Base class for all errors raised by joem."""


class InvalidParameter(JoemError, ValueError):
    pass


class InvalidInput(JoemError, ValueError):
    pass


class UnknownClass(JoemError, KeyError):
    def __init__(self, class_id):
        super().__init__(class_id)
        self.class_id = class_id

    def __str__(self):
        return f"no semantic vector for class id {self.class_id}"


class InvalidLabel(JoemError, ValueError):
    pass


class UndefinedLoss(JoemError, ValueError):
    pass


class UndefinedMetric(JoemError, ValueError):
    pass


class DegenerateInput(JoemError, ValueError):
    pass


class NonFiniteError(JoemError, FloatingPointError):
    pass


class TrainingDiverged(JoemError, RuntimeError):
    """Raised when the training loss turns non-finite.

    ``last_good`` carries the parameters from the last step whose loss was
    finite, so callers can still write a checkpoint.
    """

    def __init__(self, message, last_good=None, epoch=None, step=None):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch
        self.step = step
