"""Exception hierarchy shared by every module of the toolkit."""


class NormLimeError(Exception):
    """Base class for all toolkit errors."""


class InputShapeError(NormLimeError, ValueError):
    """An array has the wrong length or number of dimensions."""


class CapabilityError(NormLimeError, TypeError):
    """The predictor does not expose a required capability."""


class DataError(NormLimeError, ValueError):
    """A dataset is empty or violates its invariants."""


class FormatError(NormLimeError, ValueError):
    """A file does not follow its documented format."""


class VersionError(FormatError):
    """A model file was written with an unsupported format version."""


class DivergenceError(NormLimeError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, loss):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class DegenerateWeightsError(NormLimeError, ValueError):
    """Sample weights (or explanation weights) are all zero."""


class EmptyClassError(NormLimeError, ValueError):
    """No instances or explanations exist for a requested class."""

    def __init__(self, label, what="explanations"):
        super().__init__(f"no {what} for class {label}")
        self.label = label


class InvalidSalienceError(NormLimeError, ValueError):
    """A salience map contains non-finite scores."""
