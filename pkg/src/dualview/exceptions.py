"""Error types raised across the package.

All of them derive from :class:`DualViewError` (itself a ``ValueError``) so
callers can catch data problems in one place; the CLI maps them to exit 1.
"""


class DualViewError(ValueError):
    pass


class NotMultiple(DualViewError):
    """Image size is not an exact multiple of the encoder input size."""


class TooSmall(DualViewError):
    """Image is smaller than the encoder input along some axis."""


class ShapeMismatch(DualViewError):
    pass


class WrongPerspective(DualViewError):
    pass


class OutOfRange(DualViewError):
    pass


class NonFinite(DualViewError):
    """A tensor contains NaN or Inf."""


class NotDivisible(DualViewError):
    pass


class UnknownVariant(DualViewError):
    pass


class UnsupportedFormat(DualViewError):
    pass


class CorruptFile(DualViewError):
    pass
