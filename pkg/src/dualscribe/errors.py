"""Exception types shared across dualscribe."""


class DualscribeError(Exception):
    """Base class for all package errors."""


class ShapeError(DualscribeError):
    """Operands have incompatible shapes."""


class DataError(DualscribeError):
    """Bad or missing user-supplied data (files, corpora, token ids)."""


class InvariantError(DualscribeError):
    """An internal contract was violated (non-finite values, broken state)."""
