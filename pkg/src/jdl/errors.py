"""Exception types raised across the package.

Every error below derives from :class:`Error`, which itself derives from
ValueError so generic callers can catch malformed-input failures without
importing this module.
"""

from __future__ import annotations


class Error(ValueError):
    """Base class for all package-specific errors."""


# --- state spaces and rate matrices ---------------------------------------


class NotSquare(Error):
    """Rate matrix is not a square 2-d array."""


class NegativeOffDiagonal(Error):
    """An off-diagonal rate entry is negative."""


class ColumnSumNonzero(Error):
    """A column of the rate matrix does not sum to zero within tolerance."""


class TooLarge(Error):
    """Requested state space exceeds the configured size cap."""


class POutOfRange(Error):
    """Per-coordinate flip probability must lie strictly inside (0, 1)."""


# --- exact computations ----------------------------------------------------


class NegativeTime(Error):
    """Time argument outside the valid range."""


class EigenFailure(Error):
    """Spectral decomposition failed its reconstruction or range check."""


class ZeroDenominator(Error):
    """Score or ratio requested at a state with (floored-off) zero mass."""


class SupportMismatch(Error):
    """KL divergence undefined: q vanishes where p has mass and flooring is off."""


# --- spectral diagnostics --------------------------------------------------


class NotSymmetric(Error):
    """Operation requires a symmetric rate matrix."""


class Disconnected(Error):
    """The transition graph is disconnected (zero spectral gap)."""


class LengthMismatch(Error):
    """Vector arguments have inconsistent lengths."""


class NonPositiveEntry(Error):
    """Entropy functional requires strictly positive entries."""


class OptimizationDiverged(Error):
    """All optimizer restarts failed to approach the seed objective value."""


class TooLargeForExact(Error):
    """Exact subset enumeration refused; state space too large."""


class NonPositiveRho(Error):
    """Mixing-time bound needs a strictly positive log-Sobolev estimate."""


# --- Poisson random measures ------------------------------------------------


class BoundViolated(Error):
    """Evaluated intensity exceeded its declared upper bound."""


class NonPositiveRatio(Error):
    """Likelihood-ratio function must be strictly positive along the path."""


# --- samplers ----------------------------------------------------------------


class EmptyGrid(Error):
    """Time grid would contain no steps (e.g. delta >= T)."""


class StepUnderflow(Error):
    """Grid step fell below representable tolerance; kappa or delta too small."""


# --- score training -----------------------------------------------------------


class NonPositiveScore(Error):
    """Score values must be strictly positive."""


class Diverged(Error):
    """Training produced a non-finite loss."""


# --- command line ---------------------------------------------------------------


class UnknownKey(Error):
    """Config file contains a key the run config does not define."""


class OutOfRange(Error):
    """Config value outside its documented range."""


class MissingFile(Error):
    """A path given in the config does not exist."""
