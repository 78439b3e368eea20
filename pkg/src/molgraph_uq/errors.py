"""Exception hierarchy shared across the package."""


class MolGraphUQError(Exception):
    """Base class for all package errors."""


class SmilesSyntaxError(MolGraphUQError, ValueError):
    """Malformed SMILES: unbalanced parentheses/brackets, unknown symbol, open ring closure."""


class ValenceError(MolGraphUQError, ValueError):
    pass


class SizeError(MolGraphUQError, ValueError):
    pass


class ShapeError(MolGraphUQError, ValueError):
    pass


class NotScalarError(MolGraphUQError, ValueError):
    pass


class DetachedError(MolGraphUQError, RuntimeError):
    pass


class TaskMismatch(MolGraphUQError, ValueError):
    pass


class TooFewSamples(MolGraphUQError, ValueError):
    pass


class TooSmall(MolGraphUQError, ValueError):
    pass


class NonFiniteLoss(MolGraphUQError, FloatingPointError):
    def __init__(self, epoch, batch_id, value):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch_id}")
        self.epoch = epoch
        self.batch_id = batch_id
        self.value = value


class CheckpointFormatError(MolGraphUQError, ValueError):
    pass
