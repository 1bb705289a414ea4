"""Discrete diffusion models on finite state spaces.

Forward corruption processes are continuous-time Markov chains with a
validated rate matrix (column convention: dp/dt = Q p).  The package
provides exact marginals, scores and backward rate matrices; spectral and
log-Sobolev convergence diagnostics; Poisson-random-measure path machinery
with change-of-measure likelihood ratios; tau-leaping and uniformization
backward samplers; tabular score training on the denoising objective; and
an experiment layer that decomposes terminal sampling error into
truncation, approximation, and discretization parts.
"""

__version__ = "0.1.0"

from . import analysis, cli, exact, prm, samplers, score, spectral, statespace
from .errors import Error

__all__ = [
    "Error",
    "analysis",
    "cli",
    "exact",
    "prm",
    "samplers",
    "score",
    "spectral",
    "statespace",
]
