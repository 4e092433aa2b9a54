"""Exception hierarchy shared across the package."""


class SparseFocusError(Exception):
    pass


class ContractError(SparseFocusError, ValueError):
    """An argument violated a documented precondition."""


class SampleFormatError(SparseFocusError):
    """On-disk sample or checkpoint could not be decoded."""


class MissingFileError(SampleFormatError, FileNotFoundError):
    pass


class SizeMismatchError(SampleFormatError):
    pass


class UnsupportedVersionError(SampleFormatError):
    pass


class NumericalError(SparseFocusError, ArithmeticError):
    pass


class NonFiniteGradientError(NumericalError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


class NonFiniteLossError(NumericalError):
    def __init__(self, epoch: int, history=None, checkpoint=None):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch
        self.history = history
        self.checkpoint = checkpoint
