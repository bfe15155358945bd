"""Error taxonomy shared across the package.

Every failure the CLI can surface carries a short machine-readable code;
the CLI prints it as a single ``<code>-error: message`` line and exits
nonzero.
"""


class OdsegError(Exception):
    """Base class for all package errors."""

    code = "internal"


class ShapeError(OdsegError):
    """Tensor or image dimensions violate an operation's contract."""

    code = "shape"


class ParameterError(OdsegError):
    """A configuration value or argument is out of its legal range."""

    code = "parameter"


class FormatError(OdsegError):
    """A file on disk does not match its documented format."""

    code = "format"


class StateError(OdsegError):
    """An operation was called on an object in the wrong lifecycle state."""

    code = "state"


class ContractError(OdsegError):
    """An internal API contract was violated (e.g. non-scalar loss)."""

    code = "contract"


class FileError(OdsegError):
    """A referenced path is missing or unreadable."""

    code = "file"


class UsageError(OdsegError):
    """Invalid command-line usage."""

    code = "usage"
