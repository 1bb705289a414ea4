"""Spectral-gap, conductance, and modified log-Sobolev diagnostics.

All quantities refer to the Laplacian L = -Q of a symmetric generator.
The Dirichlet form is E(f, g) = sum_{x,y} f(y) L(x,y) g(x) pi(y) and the
entropy functional Ent(f) = E_pi[f log f] - E_pi[f] log E_pi[f].

Normalization note: the ratio E(f, log f)/Ent(f) has infimum 2*lambda_2 on
the two-point unit chain, so the convention under which the log-Sobolev
constant is dominated by the spectral gap is the halved one,
rho = inf_f E(f, log f) / (2 Ent(f)).  mls_constant_estimate reports the
halved ratio as rho_hat and carries the raw ratio alongside; KL along the
semigroup then decays at least as exp(-2 rho t), so mixing_time_bound built
from rho_hat is conservative.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    Disconnected,
    LengthMismatch,
    NonPositiveEntry,
    NonPositiveRho,
    NotSymmetric,
    OptimizationDiverged,
    TooLargeForExact,
)
from .statespace import RateMatrix, off_diagonal

GAP_TOL = 1e-10
EXACT_CUT_LIMIT = 20
REVERSIBILITY_TOL = 1e-10
NORMALIZATION_NOTE = (
    "rho_hat = inf_f E(f, log f) / (2 Ent(f)); the un-halved ratio "
    "E(f, log f)/Ent(f) equals 2*rho_hat and is reported as raw_ratio"
)


def _require_symmetric(q: RateMatrix) -> None:
    if not q.symmetric:
        raise NotSymmetric("operation requires a symmetric rate matrix")


def _require_reversible(q: RateMatrix, pi: np.ndarray) -> None:
    """Detailed balance pi(x) q(y,x) = pi(y) q(x,y), up to rounding."""
    if np.any(pi <= 0.0):
        raise NonPositiveEntry("stationary law must be strictly positive")
    flux = q.entries * pi[None, :]
    scale = max(float(np.abs(flux).max()), 1.0)
    if float(np.abs(flux - flux.T).max()) > REVERSIBILITY_TOL * scale:
        raise NotSymmetric("chain is not reversible with respect to pi")


def _symmetrized(q: RateMatrix, pi: np.ndarray) -> np.ndarray:
    """Similarity transform making a reversible generator symmetric.

    Returns D^{-1/2} Q D^{1/2} with D = diag(pi); same spectrum as Q, and
    eigenvectors map back to function space as u / sqrt(pi).
    """
    root = np.sqrt(pi)
    return q.entries * root[None, :] / root[:, None]


def reversible_spectral_gap(q: RateMatrix, pi: np.ndarray) -> float:
    """lambda_2 of -Q for a chain reversible w.r.t. pi (symmetrized solve).

    Extends spectral_gap beyond symmetric Q; detailed balance is checked
    and NotSymmetric raised when it fails, so non-reversible generators
    are still refused rather than silently mis-analyzed.
    """
    pi = np.asarray(pi, dtype=np.float64)
    if pi.shape != (q.size,):
        raise LengthMismatch(f"pi has shape {pi.shape}, expected ({q.size},)")
    _require_reversible(q, pi)
    w = np.linalg.eigvalsh(-_symmetrized(q, pi))
    gap = float(w[1])
    if gap < GAP_TOL:
        raise Disconnected(f"spectral gap {gap:.3e} below {GAP_TOL}")
    return gap


def spectral_gap(q: RateMatrix) -> float:
    """Second-smallest eigenvalue lambda_2 of L = -Q (the first is 0).

    Raises Disconnected when lambda_2 < 1e-10, i.e. the transition graph
    has more than one component.
    """
    _require_symmetric(q)
    w = np.linalg.eigvalsh(-q.entries)
    gap = float(w[1])
    if gap < GAP_TOL:
        raise Disconnected(f"spectral gap {gap:.3e} below {GAP_TOL}")
    return gap


def dirichlet_form(
    f: np.ndarray, g: np.ndarray, pi: np.ndarray, q: RateMatrix
) -> float:
    """E(f, g) = sum_{x,y} f(y) L(x,y) g(x) pi(y) with L = -Q."""
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    n = q.size
    for name, v in (("f", f), ("g", g), ("pi", pi)):
        if v.shape != (n,):
            raise LengthMismatch(f"{name} has shape {v.shape}, expected ({n},)")
    lap = -q.entries
    return float((f * pi) @ (lap.T @ g))


def entropy_functional(f: np.ndarray, pi: np.ndarray) -> float:
    """Ent_pi(f) = E_pi[f log f] - E_pi[f] log E_pi[f]; needs f > 0.

    Homogeneous of degree one: Ent(c f) = c Ent(f) for c > 0.
    """
    f = np.asarray(f, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    if f.shape != pi.shape:
        raise LengthMismatch(f"f shape {f.shape} != pi shape {pi.shape}")
    if np.any(f <= 0.0):
        raise NonPositiveEntry(f"entropy needs f > 0, min entry {f.min()}")
    ef = float(pi @ f)
    return float(pi @ (f * np.log(f))) - ef * math.log(ef)


def _ratio_near_one(h: np.ndarray, lap: np.ndarray, pi: np.ndarray) -> float:
    """Objective E(f, log f)/(2 Ent(f)) at f = 1 + h, stable for small h."""
    theta = np.log1p(h)
    num = theta @ (lap @ (pi * (1.0 + h)))
    m = float(pi @ h)
    ent = float(pi @ ((1.0 + h) * theta)) - (1.0 + m) * math.log1p(m)
    return num / (2.0 * ent)


@dataclass(frozen=True)
class MLSEstimate:
    """Upper-bound estimate of the modified log-Sobolev constant.

    rho_hat is the halved-ratio value (see module docstring); raw_ratio is
    2*rho_hat; minimizer is the best f found.  The estimate is an upper
    bound on the true constant because every candidate f is feasible.
    """

    rho_hat: float
    raw_ratio: float
    minimizer: np.ndarray
    normalization_note: str = NORMALIZATION_NOTE
    label: str = "upper bound"


def mls_constant_estimate(
    q: RateMatrix,
    pi: np.ndarray | None = None,
    *,
    restarts: int = 64,
    iters: int = 2000,
    seed: int = 0,
) -> MLSEstimate:
    """Minimize E(f, log f)/(2 Ent(f)) over positive f by multi-restart GD.

    Restarts mix spectral seeds f = 1 + zeta*v2 (zeta in {0.1, 1}) with
    random log-normal fields; descent runs on theta = log f with E_pi[f]
    projected to 1 each step.  A ladder of analytic seeds 1 + zeta*v2 down
    to zeta = 1e-8 is also evaluated directly (each is feasible, so each
    value upper-bounds the infimum); the reported rho_hat is the smallest
    objective value seen anywhere.  Raises OptimizationDiverged only if
    nothing gets below 10x the zeta=0.1 seed value.

    Non-symmetric q is accepted only together with an explicit pi it is
    reversible against; the spectral seed then comes from the symmetrized
    similarity D^{-1/2} Q D^{1/2}, mapped back to function space.
    """
    n = q.size
    if pi is None:
        _require_symmetric(q)
        pi = np.full(n, 1.0 / n)
    else:
        pi = np.asarray(pi, dtype=np.float64)
        if pi.shape != (n,):
            raise LengthMismatch(f"pi has shape {pi.shape}, expected ({n},)")
        if not q.symmetric:
            _require_reversible(q, pi)
    lap = -q.entries
    w, u = np.linalg.eigh(lap if q.symmetric else -_symmetrized(q, pi))
    v2 = u[:, 1] if q.symmetric else u[:, 1] / np.sqrt(pi)
    v2 = v2 / np.abs(v2).max()

    seed_value = _ratio_near_one(0.1 * v2, lap, pi)
    best_val = seed_value
    best_f = 1.0 + 0.1 * v2
    for zeta in (1.0 * 0.99, 1e-2, 1e-4, 1e-6, 1e-8):
        val = _ratio_near_one(zeta * v2, lap, pi)
        if val < best_val:
            best_val, best_f = val, 1.0 + zeta * v2

    rng = np.random.default_rng(seed)
    theta = 0.5 * rng.standard_normal((restarts, n))
    theta[0] = np.log1p(0.1 * v2)
    if restarts > 1:
        theta[1] = np.log1p(0.99 * v2)
    step = 0.5
    ent_floor = 1e-12
    for k in range(iters):
        theta -= np.log(np.exp(theta) @ pi)[:, None]
        f = np.exp(theta)
        pf = pi * f
        num = np.einsum("ri,ri->r", theta, pf @ lap.T)
        ent = np.einsum("ri,ri->r", pf, theta)
        ok = ent > ent_floor
        ratio = np.where(ok, num / (2.0 * np.maximum(ent, ent_floor)), np.inf)
        i = int(np.argmin(ratio))
        if ratio[i] < best_val:
            best_val = float(ratio[i])
            best_f = f[i].copy()
        grad_num = pf @ lap.T + pf * (theta @ lap)
        grad = (grad_num - (2.0 * ratio)[:, None] * (pf * theta)) / (
            2.0 * np.maximum(ent, ent_floor)
        )[:, None]
        grad = np.where(ok[:, None], grad, 0.0)
        scale = np.abs(grad).max(axis=1, keepdims=True) + 1e-30
        theta = theta - step * (0.999**k) * grad / scale
        # collapsed restarts get a fresh random field
        dead = ~ok
        if dead.any():
            theta[dead] = 0.5 * rng.standard_normal((int(dead.sum()), n))
    if not best_val < 10.0 * seed_value:
        raise OptimizationDiverged(
            f"best ratio {best_val:.3e} never got below 10x seed {seed_value:.3e}"
        )
    return MLSEstimate(
        rho_hat=float(best_val),
        raw_ratio=float(2.0 * best_val),
        minimizer=best_f,
    )


@dataclass(frozen=True)
class ConductanceResult:
    phi: float
    exact: bool


def conductance(
    q: RateMatrix, *, exact_limit: int = EXACT_CUT_LIMIT, method: str = "auto"
) -> ConductanceResult:
    """Edge-expansion min over cuts of cut(S) / min(vol(S), vol(S^c)).

    Weights are the off-diagonal rates; vol uses total exit rates.  Up to
    `exact_limit` states every cut is enumerated; beyond that method="auto"
    switches to a Fiedler sweep cut whose value is only an upper bound, and
    method="exact" raises TooLargeForExact instead.
    """
    _require_symmetric(q)
    n = q.size
    w = off_diagonal(q)
    deg = w.sum(axis=0)
    total = float(deg.sum())
    if n <= exact_limit and method in ("auto", "exact"):
        best = math.inf
        masks = np.arange(2 ** (n - 1) - 1, dtype=np.uint64)
        chunk = 1 << 16
        for lo in range(0, masks.size, chunk):
            m = masks[lo : lo + chunk]
            bits = np.empty((m.size, n))
            bits[:, 0] = 1.0
            for j in range(1, n):
                bits[:, j] = (m >> np.uint64(j - 1)) & np.uint64(1)
            vol = bits @ deg
            inside = np.einsum("ci,ij,cj->c", bits, w, bits)
            cut = vol - inside
            small = np.minimum(vol, total - vol)
            with np.errstate(invalid="ignore", divide="ignore"):
                ratio = np.where(small > 0, cut / small, np.where(cut > 0, np.inf, 0.0))
            best = min(best, float(ratio.min()))
        return ConductanceResult(phi=best, exact=True)
    if method == "exact":
        raise TooLargeForExact(f"{n} states exceeds exact cut limit {exact_limit}")
    # Fiedler sweep: order states by the second Laplacian eigenvector and
    # scan prefix cuts; an upper bound only.
    _, u = np.linalg.eigh(-q.entries)
    order = np.argsort(u[:, 1])
    best = math.inf
    in_set = np.zeros(n, dtype=bool)
    for x in order[:-1]:
        in_set[x] = True
        s = in_set.astype(np.float64)
        vol = float(s @ deg)
        cut = vol - float(s @ w @ s)
        small = min(vol, total - vol)
        if small > 0:
            best = min(best, cut / small)
        elif cut == 0:
            best = 0.0
    return ConductanceResult(phi=best, exact=False)


@dataclass(frozen=True)
class CheegerBounds:
    lo: float
    phi: float
    hi: float
    constant_degree: bool


def cheeger_check(q: RateMatrix) -> CheegerBounds:
    """Sandwich lambda_2(Lnorm)/2 <= phi <= sqrt(2 lambda_2(Lnorm)).

    Lnorm is the degree-normalized Laplacian I - D^{-1/2} W D^{-1/2}; for
    non-constant degrees the normalized form is still used and the result
    flags it.
    """
    _require_symmetric(q)
    w = off_diagonal(q)
    deg = w.sum(axis=0)
    if np.any(deg <= 0.0):
        raise Disconnected("isolated state: zero total exit rate")
    inv_sqrt = 1.0 / np.sqrt(deg)
    lnorm = np.eye(q.size) - (inv_sqrt[:, None] * w) * inv_sqrt[None, :]
    lam2 = float(np.linalg.eigvalsh(lnorm)[1])
    phi = conductance(q).phi
    return CheegerBounds(
        lo=lam2 / 2.0,
        phi=phi,
        hi=math.sqrt(2.0 * max(lam2, 0.0)),
        constant_degree=bool(np.ptp(deg) <= 1e-12 * max(deg.max(), 1.0)),
    )


def mixing_time_bound(rho_hat: float, size: int, eps: float = math.exp(-1.0)) -> float:
    """Conservative epsilon-mixing time (1/rho_hat)(log(1/eps) + log log size)."""
    if rho_hat <= 0.0:
        raise NonPositiveRho(f"rho_hat must be > 0, got {rho_hat}")
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    if size < 2:
        raise ValueError(f"size must be >= 2, got {size}")
    return (math.log(1.0 / eps) + math.log(math.log(size))) / rho_hat


@dataclass(frozen=True)
class SpectralReport:
    """Bundle of convergence diagnostics for a symmetric generator."""

    gap: float
    mls_estimate: float
    raw_ratio: float
    conductance: float
    conductance_exact: bool
    cheeger_lo: float
    cheeger_hi: float
    constant_degree: bool
    mixing_time_bound: float
    normalization_note: str

    def __post_init__(self) -> None:
        assert self.mls_estimate <= self.gap + 1e-6, (
            f"mls estimate {self.mls_estimate} exceeds gap {self.gap} + 1e-6"
        )
        assert self.cheeger_lo <= self.conductance + 1e-9, "Cheeger lower edge failed"
        assert self.conductance <= self.cheeger_hi + 1e-9, "Cheeger upper edge failed"

    def to_json(self) -> str:
        return json.dumps(
            {f: getattr(self, f) for f in self.__dataclass_fields__}, indent=2
        )

    def table(self) -> str:
        rows = [
            ("spectral gap lambda_2", self.gap),
            ("mls estimate rho_hat", self.mls_estimate),
            ("raw ratio 2*rho_hat", self.raw_ratio),
            ("conductance phi" + ("" if self.conductance_exact else " (sweep ub)"),
             self.conductance),
            ("cheeger lower lambda_2(Lnorm)/2", self.cheeger_lo),
            ("cheeger upper sqrt(2 lambda_2(Lnorm))", self.cheeger_hi),
            ("mixing time bound", self.mixing_time_bound),
        ]
        width = max(len(name) for name, _ in rows)
        return "\n".join(f"{name:<{width}}  {val:.10g}" for name, val in rows)


def spectral_report(
    q: RateMatrix,
    pi: np.ndarray | None = None,
    *,
    restarts: int = 64,
    iters: int = 2000,
    seed: int = 0,
    eps: float = math.exp(-1.0),
) -> SpectralReport:
    gap = spectral_gap(q)
    mls = mls_constant_estimate(q, pi, restarts=restarts, iters=iters, seed=seed)
    cheeger = cheeger_check(q)
    return SpectralReport(
        gap=gap,
        mls_estimate=mls.rho_hat,
        raw_ratio=mls.raw_ratio,
        conductance=cheeger.phi,
        conductance_exact=conductance(q).exact,
        cheeger_lo=cheeger.lo,
        cheeger_hi=cheeger.hi,
        constant_degree=cheeger.constant_degree,
        mixing_time_bound=mixing_time_bound(mls.rho_hat, q.size, eps),
        normalization_note=mls.normalization_note,
    )
