"""Exception types shared across the package."""


class NosafError(Exception):
    pass


class DimensionError(NosafError, ValueError):
    pass


class ArgumentError(NosafError, ValueError):
    pass


class DataError(NosafError, ValueError):
    pass


class ParseError(NosafError, ValueError):
    pass


class IntegrityError(NosafError, ValueError):
    pass


class DivergenceError(NosafError, RuntimeError):
    def __init__(self, epoch, loss):
        super().__init__(f"training diverged at epoch {epoch}: loss={loss!r}")
        self.epoch = epoch
        self.loss = loss
