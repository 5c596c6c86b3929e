from retina_align.consts import EXIT_DATA, EXIT_NUMERICAL, EXIT_USAGE


class RetinaAlignError(Exception):
    exit_code = 1


class ConfigError(RetinaAlignError):
    exit_code = EXIT_USAGE


class DataError(RetinaAlignError):
    exit_code = EXIT_DATA


class FormatError(DataError):
    """A malformed file. ``position`` locates the problem (byte offset,
    line number or key path)."""

    def __init__(self, msg, position=None):
        self.msg = msg
        self.position = position
        if position is not None:
            msg = '{} (at {})'.format(msg, position)
        super(FormatError, self).__init__(msg)


class PromptBankError(FormatError):
    pass


class ManifestError(FormatError):
    pass


class EmbeddingFormatError(FormatError):
    pass


class ModelFormatError(FormatError):
    pass


class UnknownCategoryError(DataError, KeyError):

    def __str__(self):
        # KeyError would repr() the message
        return str(self.args[0]) if self.args else ''


class VocabularyError(DataError):
    pass


class InsufficientSamplesError(DataError):
    pass


class NumericalError(RetinaAlignError, ArithmeticError):
    exit_code = EXIT_NUMERICAL

    def __init__(self, msg, index=None, block=None):
        self.index = index
        self.block = block
        super(NumericalError, self).__init__(msg)


class ContractError(RetinaAlignError):
    exit_code = EXIT_NUMERICAL


class ShapeError(DataError, ValueError):
    pass
