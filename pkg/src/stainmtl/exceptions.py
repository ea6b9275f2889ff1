"""Exception types raised across the package."""


class StainError(Exception):
    """Base class for all package errors."""


class InvalidInput(StainError, ValueError):
    pass


class InsufficientTissue(StainError):
    """Too few tissue pixels survive masking to fit a stain matrix."""

    def __init__(self, n_tissue, n_required):
        self.n_tissue = n_tissue
        self.n_required = n_required
        super().__init__(
            f"only {n_tissue} tissue pixels after masking, need at least {n_required}"
        )


class NotFound(StainError, FileNotFoundError):
    pass


class FormatError(StainError, ValueError):
    pass


class ParseError(FormatError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateId(ParseError):
    def __init__(self, id_, line=None):
        self.id = id_
        super().__init__(f"duplicate id {id_!r}", line)


class MissingColumn(ParseError):
    def __init__(self, column):
        self.column = column
        super().__init__(f"missing required column {column!r}")
