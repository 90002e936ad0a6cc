"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes: config errors (2),
numeric failures (4), everything else raised here (3).
"""


class MoelabError(Exception):
    """Base class for all package errors."""


class ShapeError(MoelabError):
    """Tensor dimensions disagree with an operation's contract."""


class ConfigError(MoelabError):
    """Invalid or inconsistent configuration."""


class NumericError(MoelabError):
    """Non-finite values where finite numbers are required."""


class ContractError(MoelabError):
    """An API precondition was violated by the caller."""


class DecodeError(MoelabError):
    """Token ids that cannot be decoded back to bytes."""


class SkipExample(MoelabError):
    """Signals that a sequence is unsuitable for the requested objective."""
