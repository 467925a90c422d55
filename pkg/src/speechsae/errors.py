"""Exception hierarchy shared by every module."""


class SpeechSaeError(Exception):
    pass


class ContractError(SpeechSaeError, ValueError):
    """A caller broke a precondition (shape, range, index)."""


class InputError(SpeechSaeError, ValueError):
    """Inputs are well-formed but unusable for the request."""


class CorruptInputError(InputError):
    pass


class ParseError(SpeechSaeError, ValueError):
    pass


class MagicMismatchError(ParseError):
    pass


class TruncatedFileError(ParseError):
    pass


class NonFiniteValueError(ParseError):
    pass


class ChecksumError(ParseError):
    pass


class MalformedResponseError(ParseError):
    pass


class MissingFieldError(ParseError):
    pass


class InvalidEnumError(ParseError):
    pass
