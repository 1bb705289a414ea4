"""Exact distributional computations for finite-state CTMCs.

The forward marginals of dp/dt = Q p are p_t = exp(tQ) p_0.  For symmetric
Q this is evaluated through the spectral decomposition of the Laplacian
L = -Q (eigenvalues 0 = lambda_1 <= lambda_2 <= ...); otherwise through
scaling-and-squaring (scipy's Pade-13 expm).  On top of the propagator sit
the pointwise score s(x, y) = p(y)/p(x), the backward generator, KL/TV
divergences, and reverse-time marginal closures p_check_s = p_{T-s}.
"""

from __future__ import annotations

import io
import json
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import rel_entr

from .errors import (
    Disconnected,
    EigenFailure,
    NegativeTime,
    SupportMismatch,
    ZeroDenominator,
)
from .statespace import RateMatrix, off_diagonal, validate_rate_matrix

MASS_TOL = 1e-10
CLAMP_TOL = -1e-14
RECONSTRUCTION_TOL = 1e-8
SCORE_FLOOR = 1e-300
KL_FLOOR = 1e-12


@dataclass(frozen=True)
class Distribution:
    """A probability vector: sums to 1 within 1e-10, entries >= -1e-14 pre-clamp."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1:
            raise ValueError(f"distribution must be a vector, got shape {p.shape}")
        if p.min() < CLAMP_TOL:
            raise ValueError(f"negative probability {p.min():.3e} below clamp tolerance")
        p = np.maximum(p, 0.0)
        total = p.sum()
        if abs(total - 1.0) > MASS_TOL:
            raise ValueError(f"probabilities sum to {total!r}, not 1 within {MASS_TOL}")
        p = p / total
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def size(self) -> int:
        return self.probs.shape[0]


def uniform(n: int) -> Distribution:
    return Distribution(np.full(n, 1.0 / n))


def point_mass(x: int, n: int) -> Distribution:
    p = np.zeros(n)
    p[x] = 1.0
    return Distribution(p)


@dataclass(frozen=True)
class Propagator:
    """Evaluator of the semigroup exp(tQ) acting on distributions.

    Symmetric generators carry the eigendecomposition L = -Q = U diag(w) U^T
    (w ascending, w[0] ~ 0); non-symmetric ones fall back to expm per query.
    Queries at arbitrary t recompute from the stored form, so instances are
    safe to share across threads.
    """

    q: RateMatrix
    eigenvalues: np.ndarray | None
    eigenvectors: np.ndarray | None

    @property
    def spectral(self) -> bool:
        return self.eigenvalues is not None

    def action_many(self, v: np.ndarray, ts: np.ndarray) -> np.ndarray:
        """exp(t Q) v for every t in ts; returns (len(ts), n)."""
        ts = np.asarray(ts, dtype=np.float64)
        if np.any(ts < 0):
            raise NegativeTime(f"negative time in {ts.min()}")
        if self.spectral:
            coef = self.eigenvectors.T @ v
            decay = np.exp(-np.outer(ts, self.eigenvalues))
            return (decay * coef) @ self.eigenvectors.T
        out = np.empty((ts.shape[0], v.shape[0]))
        for i, t in enumerate(ts):
            out[i] = scipy.linalg.expm(t * self.q.entries) @ v
        return out

    def kernel(self, t: float) -> np.ndarray:
        """The column-stochastic matrix exp(tQ): entry (y, x) = P(state y at t | x at 0)."""
        if t < 0:
            raise NegativeTime(f"negative time {t}")
        if self.spectral:
            decay = np.exp(-t * self.eigenvalues)
            k = (self.eigenvectors * decay) @ self.eigenvectors.T
        else:
            k = scipy.linalg.expm(t * self.q.entries)
        k = np.maximum(k, 0.0)
        return k / k.sum(axis=0)


def build_propagator(q: RateMatrix) -> Propagator:
    """Spectral route for symmetric q (with reconstruction check), expm otherwise.

    A failed reconstruction (max-abs error > 1e-8) or an eigenvalue below
    -1e-8 raises-and-falls-back: the propagator degrades to expm with a
    warning rather than returning a bad spectral form.
    """
    if not q.symmetric:
        return Propagator(q=q, eigenvalues=None, eigenvectors=None)
    lap = -q.entries
    try:
        w, u = np.linalg.eigh(lap)
        err = np.abs((u * w) @ u.T - lap).max()
        if err > RECONSTRUCTION_TOL or w[0] < -RECONSTRUCTION_TOL:
            raise EigenFailure(
                f"reconstruction error {err:.2e} or min eigenvalue {w[0]:.2e} out of range"
            )
    except (np.linalg.LinAlgError, EigenFailure) as exc:
        warnings.warn(f"spectral decomposition rejected ({exc}); using expm fallback")
        return Propagator(q=q, eigenvalues=None, eigenvectors=None)
    w = np.where(np.abs(w) <= RECONSTRUCTION_TOL, np.maximum(w, 0.0), w)
    w.setflags(write=False)
    u.setflags(write=False)
    return Propagator(q=q, eigenvalues=w, eigenvectors=u)


def propagate(prop: Propagator, p0: Distribution, t: float) -> Distribution:
    """The forward marginal p_t = exp(tQ) p_0."""
    if t < 0:
        raise NegativeTime(f"negative time {t}")
    v = prop.action_many(p0.probs, np.array([t]))[0]
    total = v.sum()
    assert abs(total - 1.0) <= MASS_TOL, f"mass drifted to {total!r} at t={t}"
    return Distribution(v)


def propagate_many(prop: Propagator, p0: Distribution, ts: np.ndarray) -> np.ndarray:
    """Forward marginals at many times, renormalized; returns (len(ts), n)."""
    out = prop.action_many(p0.probs, ts)
    totals = out.sum(axis=1)
    assert np.abs(totals - 1.0).max() <= MASS_TOL, "mass drifted"
    out = np.maximum(out, 0.0)
    return out / out.sum(axis=1, keepdims=True)


def transition_kernel(prop: Propagator, t: float) -> np.ndarray:
    """exp(tQ) as a column-stochastic matrix (symmetric when Q is)."""
    return prop.kernel(t)


def score(p: Distribution | np.ndarray, x: int, *, floor: float | None = SCORE_FLOOR) -> np.ndarray:
    """The score vector s(x, .) = p(.)/p(x) with s(x, x) = 1 exactly.

    The floor enters the division only; set floor=None to get a hard
    ZeroDenominator on vanishing p(x) instead.
    """
    probs = p.probs if isinstance(p, Distribution) else np.asarray(p, dtype=np.float64)
    px = probs[x]
    if floor is None:
        if px <= 0.0:
            raise ZeroDenominator(f"p({x}) = {px}; score undefined")
        den = px
    else:
        if px < 0.0:
            raise ZeroDenominator(f"p({x}) = {px} negative")
        den = max(px, floor)
    s = probs / den
    s[x] = 1.0
    return s


def score_matrix(p: Distribution | np.ndarray, *, floor: float = SCORE_FLOOR) -> np.ndarray:
    """All score vectors at once: entry (x, y) = p(y)/p(x), diagonal 1."""
    probs = p.probs if isinstance(p, Distribution) else np.asarray(p, dtype=np.float64)
    den = np.maximum(probs, floor)
    s = probs[None, :] / den[:, None]
    np.fill_diagonal(s, 1.0)
    return s


def backward_rate_matrix(q: RateMatrix, p: Distribution) -> RateMatrix:
    """Generator of the time-reversed chain at a frozen marginal p.

    Off-diagonal entry (y, x) is (p(y)/p(x)) * entries(x, y); the result is
    validated like any generator.  For symmetric q and p stationary-uniform
    this returns q itself.
    """
    probs = p.probs
    if probs.min() <= 0.0:
        raise ZeroDenominator("backward generator needs strictly positive marginals")
    off = off_diagonal(q)
    rev = (probs[:, None] / probs[None, :]) * off.T
    bar = rev.copy()
    np.fill_diagonal(bar, -rev.sum(axis=0))
    return validate_rate_matrix(bar)


def stationary_distribution(q: RateMatrix, *, null_tol: float = 1e-10) -> Distribution:
    """Solve Q p = 0, sum(p) = 1 by dense SVD nullspace.

    Requires a one-dimensional nullspace (irreducible chain); two or more
    vanishing singular values mean the transition graph is disconnected.
    """
    _, s, vt = np.linalg.svd(q.entries)
    scale = max(float(s[0]), 1.0)
    if q.entries.shape[0] > 1 and s[-2] < null_tol * scale:
        raise Disconnected("stationary law not unique: nullspace dimension > 1")
    p = vt[-1]
    p = p / p.sum()
    if p.min() < -1e-12:
        raise ZeroDenominator("stationary solve produced negative mass")
    return Distribution(np.clip(p, 0.0, None) / np.clip(p, 0.0, None).sum())


def kl_divergence(
    p: Distribution | np.ndarray,
    q: Distribution | np.ndarray,
    *,
    floor: float | None = KL_FLOOR,
) -> float:
    """KL(p || q) with q floored at `floor` before dividing.

    floor=None disables flooring; then a true zero of q under the support of
    p raises SupportMismatch.
    """
    return _kl(p, q, floor=floor)[0]


def kl_divergence_flagged(
    p: Distribution | np.ndarray,
    q: Distribution | np.ndarray,
    *,
    floor: float | None = KL_FLOOR,
) -> tuple[float, bool]:
    """KL(p || q) plus a flag telling whether the q-floor was actually hit."""
    return _kl(p, q, floor=floor)


def _kl(p, q, *, floor):
    pv = p.probs if isinstance(p, Distribution) else np.asarray(p, dtype=np.float64)
    qv = q.probs if isinstance(q, Distribution) else np.asarray(q, dtype=np.float64)
    if pv.shape != qv.shape:
        raise ValueError(f"shape mismatch {pv.shape} vs {qv.shape}")
    if floor is None:
        if np.any((qv <= 0.0) & (pv > 0.0)):
            x = int(np.argmax((qv <= 0.0) & (pv > 0.0)))
            raise SupportMismatch(f"q({x}) = 0 < p({x}) = {pv[x]} with flooring disabled")
        qf = qv
    else:
        qf = np.maximum(qv, floor)
    floored = bool(np.any((qv < (floor or 0.0)) & (pv > 0.0)))
    return float(rel_entr(pv, qf).sum()), floored


def tv_distance(p: Distribution | np.ndarray, q: Distribution | np.ndarray) -> float:
    pv = p.probs if isinstance(p, Distribution) else np.asarray(p, dtype=np.float64)
    qv = q.probs if isinstance(q, Distribution) else np.asarray(q, dtype=np.float64)
    return 0.5 * float(np.abs(pv - qv).sum())


@dataclass(frozen=True)
class ReversedMarginals:
    """Reverse-time marginal closure: at(s) = p_{T-s} for s in [0, T].

    Backed by the propagator's any-time queries, so arbitrary (not just
    pre-gridded) s are exact.
    """

    prop: Propagator
    p0: Distribution
    horizon: float

    def at(self, s: float) -> Distribution:
        if s < 0 or s > self.horizon:
            raise NegativeTime(f"reverse time {s} outside [0, {self.horizon}]")
        return propagate(self.prop, self.p0, self.horizon - s)

    def at_many(self, ss: np.ndarray) -> np.ndarray:
        ss = np.asarray(ss, dtype=np.float64)
        if ss.size and (ss.min() < 0 or ss.max() > self.horizon):
            raise NegativeTime(f"reverse times outside [0, {self.horizon}]")
        return propagate_many(self.prop, self.p0, self.horizon - ss)


def reversed_marginals(prop: Propagator, p0: Distribution, horizon: float) -> ReversedMarginals:
    if horizon < 0:
        raise NegativeTime(f"negative horizon {horizon}")
    return ReversedMarginals(prop=prop, p0=p0, horizon=horizon)


# --- serialization -----------------------------------------------------------


def marginals_to_csv(rev: ReversedMarginals, ss: np.ndarray) -> str:
    """Long-format table of reverse marginals, header ``s,t,state,prob``."""
    rows = rev.at_many(ss)
    buf = io.StringIO()
    buf.write("s,t,state,prob\n")
    for s, row in zip(np.asarray(ss, dtype=np.float64), rows):
        t = rev.horizon - s
        for state, prob in enumerate(row):
            buf.write(f"{float(s)!r},{float(t)!r},{state},{float(prob)!r}\n")
    return buf.getvalue()


def eigenvalues_to_json(prop: Propagator) -> str:
    doc = {
        "spectral": prop.spectral,
        "eigenvalues": None if not prop.spectral else prop.eigenvalues.tolist(),
    }
    return json.dumps(doc)
