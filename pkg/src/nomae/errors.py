"""Exception hierarchy shared by every module."""


class NomaeError(Exception):
    """Base class for all library errors."""


class EmptyInput(NomaeError):
    pass


class InvalidPoint(NomaeError):
    pass


class InvalidConfig(NomaeError):
    pass


class InvalidScale(NomaeError):
    pass


class ShapeError(NomaeError):
    pass


class AlignmentError(NomaeError):
    pass


class MissingParent(NomaeError):
    pass


class CoverageError(NomaeError):
    pass


class EmptyScale(NomaeError):
    pass


class NumericalError(NomaeError):
    """Raised when a NaN/Inf shows up during backward; carries the node id."""

    def __init__(self, message: str, node_id: int | None = None):
        super().__init__(message)
        self.node_id = node_id


class FormatError(NomaeError):
    pass


class ParseError(NomaeError):
    pass
