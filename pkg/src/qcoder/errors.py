"""Exception hierarchy shared across the package.

CLI exit codes map onto these: MissingResourceError -> 3,
BackendError -> 4, ParseError / ValidationError -> 5.
"""


class QCoderError(Exception):
    """Base for all package errors."""


class IngestError(QCoderError):
    pass


class MissingResourceError(QCoderError):
    pass


class StoreError(QCoderError):
    pass


class BackendError(QCoderError):
    pass


class CassetteMissError(BackendError):
    pass


class ParseError(QCoderError):
    pass


class ValidationError(QCoderError):
    pass
