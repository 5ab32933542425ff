"""Exception types raised across the package."""


class NSRError(Exception):
    """Base class for all package errors."""


class RayMissesBounds(NSRError):
    pass


class BehindCamera(NSRError):
    pass


class DegeneratePlane(NSRError):
    pass


class TapeConsumed(NSRError):
    pass


class OutOfImage(NSRError):
    pass


class NoUsableViews(NSRError):
    pass


class ShapeTooLarge(NSRError):
    pass


class EmptySurface(NSRError):
    pass


class EmptySet(NSRError):
    pass


class ParseError(NSRError):
    """Malformed JSON or binary input; the message names the file."""


class ValidationError(NSRError):
    """Well-formed input that violates an invariant; names the file/field."""
