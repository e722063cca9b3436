"""Exception hierarchy shared by every hypermap module.

The CLI maps these onto exit codes: input problems exit 2, I/O problems
(``OSError``) exit 3, numeric failures exit 4.
"""


class HypermapError(Exception):
    """Base class for all library errors."""


class InputError(HypermapError, ValueError):
    """Caller supplied an invalid argument or configuration."""


class ShapeError(InputError):
    """Tensor shapes are inconsistent with an operation's contract."""


class SpecError(InputError):
    """An architecture description is internally inconsistent."""


class FormatError(InputError):
    """A file on disk does not follow its documented layout."""


class StateError(HypermapError, RuntimeError):
    """An object is missing state required by the requested operation."""


class NumericError(HypermapError, ArithmeticError):
    """A computation produced NaN or infinite values."""
