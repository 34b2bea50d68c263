"""Exception hierarchy shared across the package.

Every error raised on purpose derives from ChainfitError so callers (and the
CLI) can separate data/runtime failures from programming mistakes.
"""

from __future__ import annotations


class ChainfitError(Exception):
    """Base class for all errors raised by chainfit."""


class ConfigError(ChainfitError):
    """A configuration value or combination of values is invalid."""


class PDBParseError(ChainfitError):
    """A structure file could not be parsed; message includes the line number."""


class EmptyStructureError(ChainfitError):
    """A structure or selection ended up with zero atoms."""


class UnknownChainError(ChainfitError):
    """A chain identifier is not present in the structure."""


class DegenerateGeometryError(ChainfitError):
    """Atom geometry makes an operation ill-defined (e.g. coincident atoms)."""


class DegenerateInputError(ChainfitError):
    """Numerically degenerate input to a geometric primitive."""


class CapacityError(ChainfitError):
    """More modes were requested than the system can provide."""


class DimensionMismatchError(ChainfitError):
    """Latent dimensions do not match the basis or structure they act on."""


class UndefinedSNRError(ChainfitError):
    """Noise level cannot be derived because the signal power is zero."""


class DivergenceError(ChainfitError):
    """Optimization produced a non-finite loss."""


class EmptyInputError(ChainfitError):
    """An aggregate operation received no data."""
