"""
Custom exceptions for the library.
"""


class ModPromptError(Exception):
    """
    Base class for every error raised by the library.
    """


class NoInitiation(ModPromptError):
    """
    Class cannot be initiated.
    """


class DimensionError(ModPromptError):
    """
    Tensor shapes do not fit the operation.
    """


class BoundsError(ModPromptError):
    """
    Index is outside of the tensor.
    """


class NumericError(ModPromptError):
    """
    A value is not finite or cannot be normalized.
    """


class TrainingAborted(NumericError):
    """
    Training produced a non-finite loss.
    """
    def __init__(self, step: int, loss: float):
        """
        :param step: global optimizer step at which the loss was observed
        :param loss: the offending loss value
        """
        super().__init__(
            'Training aborted at step {}: loss is {}.'.format(step, loss),
        )
        self.step = step
        self.loss = loss


class ContractError(ModPromptError):
    """
    Caller broke a precondition of an operation.
    """


class DeterminismError(ContractError):
    """
    A function expected to be deterministic returned different values.
    """


class ConfigError(ModPromptError):
    """
    Invalid configuration value.
    """


class VocabError(ConfigError):
    """
    Token id is outside of the vocabulary.
    """


class LengthError(ConfigError):
    """
    Sequence is longer than the positional table.
    """


class ScheduleError(ModPromptError):
    """
    Prompt schedule violates one of its invariants.
    """
    def __init__(self, message: str, *, invariant: str = None, layer: int = None):
        """
        :param message: human readable description
        :param invariant: name of the violated invariant
        :param layer: 1-based layer number the violation refers to
        """
        prefix = 'layer {}: '.format(layer) if layer is not None else ''
        suffix = ' [invariant: {}]'.format(invariant) if invariant else ''
        super().__init__(prefix + message + suffix)
        self.invariant = invariant
        self.layer = layer


class DataError(ModPromptError):
    """
    Dataset content does not fit the request.
    """


class DatasetIOError(ModPromptError, OSError):
    """
    Dataset files are missing or corrupted.
    """
