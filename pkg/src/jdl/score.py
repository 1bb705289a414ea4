"""Score providers and tabular score training.

A "score" here is the mass-ratio field s_t(x, y) = p_t(y) / p_t(x) that
turns forward rates into reverse-time intensities.  Providers expose it in
the reverse clock through ``rows(s, states)`` (see samplers.ScoreRows);
this module supplies the exact field, a deliberately miscalibrated one, a
trainable piecewise-constant table, and estimators for how much a provider
deviates from the truth in the entropy sense that controls sampling error:

    eps = E integral over the true reverse path of
          sum_y K(s_hat/s)(x_s, y) mu_s(y | x_s) ds,       K(r) = r - 1 - log r.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import Diverged, NonPositiveScore, OutOfRange
from .exact import ReversedMarginals
from .prm import BackwardIntensity, PathBatch, integrate_along_paths
from .samplers import TimeGrid
from .statespace import RateMatrix, off_diagonal

RATIO_FLOOR = 1e-300


# --- providers ---------------------------------------------------------------


class ExactScore:
    """True mass ratios p_t(y)/p_t(x), optionally clipped at ``clamp``."""

    def __init__(self, rev: ReversedMarginals, clamp: float = np.inf):
        if clamp <= 0.0:
            raise NonPositiveScore("clamp must be positive")
        self.rev = rev
        self.clamp = float(clamp)

    def rows(self, s: np.ndarray, states: np.ndarray) -> np.ndarray:
        probs = self.rev.at_many(s)
        px = probs[np.arange(s.size), states]
        out = probs / np.maximum(px, RATIO_FLOOR)[:, None]
        return np.minimum(out, self.clamp)


class ScaledScore:
    """A provider wrapped with a constant multiplicative miscalibration.

    Useful as a known-error reference: against the truth it has a constant
    pointwise ratio ``factor``, so the entropy mismatch is K(factor) times
    the expected integrated reverse intensity.
    """

    def __init__(self, base, factor: float):
        if factor <= 0.0:
            raise NonPositiveScore("factor must be positive")
        self.base = base
        self.factor = float(factor)
        self.clamp = float(base.clamp * factor)

    def rows(self, s: np.ndarray, states: np.ndarray) -> np.ndarray:
        return self.base.rows(s, states) * self.factor


@dataclass
class TabularScore:
    """Piecewise-constant-in-time table of log mass ratios.

    ``log_ratios[k, x, y]`` is log s_hat at reverse times in
    [points[k], points[k+1]); queries past the last point reuse the final
    block.  The diagonal is fixed at zero and never enters intensities.
    """

    points: np.ndarray
    log_ratios: np.ndarray
    clamp: float = np.inf

    def __post_init__(self) -> None:
        if self.clamp <= 0.0:
            raise NonPositiveScore("clamp must be positive")
        k, n, n2 = self.log_ratios.shape
        if n != n2 or k != self.points.size - 1:
            raise OutOfRange("log_ratios must be (n_steps, n, n)")

    def block_of(self, s: np.ndarray) -> np.ndarray:
        k = np.searchsorted(self.points, s, side="right") - 1
        return np.clip(k, 0, self.log_ratios.shape[0] - 1)

    def rows(self, s: np.ndarray, states: np.ndarray) -> np.ndarray:
        theta = self.log_ratios[self.block_of(s), states]
        return np.minimum(np.exp(theta), self.clamp)


# --- denoising loss ------------------------------------------------------------


def score_entropy_loss(
    q: RateMatrix, probs: np.ndarray, log_ratios: np.ndarray
) -> tuple[float, float, float]:
    """Population denoising loss of a log-ratio table at one time slice.

    With w(x, y) the forward rate y -> x and s_hat = exp(log_ratios),

        loss  = sum_{x != y} w(x, y) [ p(x) s_hat(x, y) - p(y) log s_hat(x, y) ]

    is convex with pointwise optimum s_hat* = p(y)/p(x).  Returns
    (loss, offset, excess): offset is the loss at the optimum and

        excess = loss - offset = sum w(x, y) p(y) K(s_hat / s*)  >=  0

    vanishes exactly at the true score.
    """
    if np.any(probs <= 0.0):
        raise NonPositiveScore("loss needs strictly positive marginals")
    w = off_diagonal(q)
    px = probs[:, None]
    py = probs[None, :]
    loss = float((w * (px * np.exp(log_ratios) - py * log_ratios)).sum())
    log_star = np.where(w > 0.0, np.log(py) - np.log(px), 0.0)
    offset = float((w * py * (1.0 - log_star)).sum())
    return loss, offset, loss - offset


def loss_gradient(q: RateMatrix, probs: np.ndarray, log_ratios: np.ndarray) -> np.ndarray:
    """d loss / d log_ratios, entry by entry (zero on the diagonal)."""
    w = off_diagonal(q)
    return w * (probs[:, None] * np.exp(log_ratios) - probs[None, :])


# --- training -------------------------------------------------------------------


@dataclass
class TrainResult:
    provider: TabularScore
    excess: np.ndarray  # final per-block excess loss
    trace: list = field(default_factory=list)  # (iteration, total excess)
    iterations: int = 0


def train_tabular_score(
    q: RateMatrix,
    rev: ReversedMarginals,
    grid: TimeGrid,
    *,
    clamp: float = np.inf,
    lr: float | None = None,
    momentum: float = 0.9,
    max_iters: int = 5000,
    tol: float = 1e-12,
    record_every: int = 25,
) -> TrainResult:
    """Fit one log-ratio table per grid block by full-batch gradient descent.

    Blocks are independent convex problems (the loss separates across time
    slices), trained jointly with momentum and step halving: whenever the
    total loss rises the step is halved (up to 30 times) and the velocity
    reset.  Stops when every block's excess falls below ``tol``.  Raises
    Diverged if the loss goes non-finite even at the smallest step.
    """
    n = q.entries.shape[0]
    k_blocks = grid.n_steps
    p = rev.at_many(grid.points[:-1])  # (k, n) marginals at block starts
    if np.any(p <= 0.0):
        raise NonPositiveScore("training needs strictly positive marginals")
    w = off_diagonal(q)

    theta = np.zeros((k_blocks, n, n))
    velocity = np.zeros_like(theta)
    step = (1.0 / q.max_rate) if lr is None else float(lr)
    if step <= 0.0:
        raise OutOfRange("learning rate must be positive")

    def losses(th):
        # overflow to +inf is fine: the step-halving logic treats it as a
        # rejected candidate rather than an error
        with np.errstate(over="ignore"):
            return np.einsum(
                "xy,kxy->k", w, p[:, :, None] * np.exp(th) - p[:, None, :] * th
            )

    logp = np.log(p)
    log_star = np.where(w[None] > 0.0, logp[:, None, :] - logp[:, :, None], 0.0)
    offs = np.einsum("xy,kxy->k", w, p[:, None, :] * (1.0 - log_star))

    def excesses(th):
        return losses(th) - offs

    total = float(losses(theta).sum())
    trace: list = [(0, float(excesses(theta).sum()))]
    halvings = 0
    it = 0
    for it in range(1, max_iters + 1):
        grad = w[None] * (p[:, :, None] * np.exp(theta) - p[:, None, :])
        velocity = momentum * velocity - step * grad
        candidate = theta + velocity
        cand_total = float(losses(candidate).sum())
        if not np.isfinite(cand_total) or cand_total > total + 1e-15:
            halvings += 1
            if halvings > 30:
                raise Diverged("training failed to make progress after 30 halvings")
            step *= 0.5
            velocity[:] = 0.0
            continue
        theta, total = candidate, cand_total
        if it % record_every == 0:
            trace.append((it, float(excesses(theta).sum())))
        if np.abs(grad).max() < 1e-14 or excesses(theta).max() < tol:
            break

    exc = excesses(theta)
    trace.append((it, float(exc.sum())))
    return TrainResult(
        provider=TabularScore(points=grid.points, log_ratios=theta, clamp=clamp),
        excess=exc,
        trace=trace,
        iterations=it,
    )


# --- mismatch estimators ----------------------------------------------------------


@dataclass(frozen=True)
class EpsilonEstimate:
    """Monte-Carlo estimate of the entropy mismatch along true reverse paths."""

    estimate: float
    se: float
    per_path: np.ndarray


def _summary(per_path: np.ndarray) -> EpsilonEstimate:
    se = float(per_path.std(ddof=1) / np.sqrt(per_path.size)) if per_path.size > 1 else 0.0
    return EpsilonEstimate(float(per_path.mean()), se, per_path)


def estimate_epsilon_continuous(
    q: RateMatrix, provider, rev: ReversedMarginals, batch: PathBatch, *, tol: float = 1e-9
) -> EpsilonEstimate:
    """Path-integral mismatch: adaptive quadrature of sum_y K(ratio) mu(y) ds."""
    back = BackwardIntensity(q, rev)
    exact_provider = ExactScore(rev)

    def integrand(ts, xs):
        mu = back.rate_rows(ts, xs)
        truth = exact_provider.rows(ts, xs)
        ratio = provider.rows(ts, xs) / np.maximum(truth, RATIO_FLOOR)
        if np.any((ratio <= 0.0) & (mu > 0.0)):
            raise NonPositiveScore("provider returned a nonpositive score on support")
        k = np.where(mu > 0.0, ratio - 1.0 - np.log(np.where(ratio > 0, ratio, 1.0)), 0.0)
        return (k * mu).sum(axis=1)

    per_path = integrate_along_paths(batch, integrand, tol=tol)
    return _summary(per_path)


def estimate_epsilon_discrete(
    q: RateMatrix, provider, rev: ReversedMarginals, grid: TimeGrid, batch: PathBatch
) -> EpsilonEstimate:
    """Riemann-sum mismatch frozen at block starts, as the samplers see it.

    Uses the batch's states at each block's left endpoint, so the estimate
    matches the piecewise-constant score actually consumed by tau-leaping.
    """
    back = BackwardIntensity(q, rev)
    exact_provider = ExactScore(rev)
    per_path = np.zeros(batch.n_paths)
    for k in range(grid.n_steps):
        s_k = float(grid.points[k])
        xs = batch.states_at(s_k)
        ts = np.full(batch.n_paths, s_k)
        mu = back.rate_rows(ts, xs)
        truth = exact_provider.rows(ts, xs)
        ratio = provider.rows(ts, xs) / np.maximum(truth, RATIO_FLOOR)
        if np.any((ratio <= 0.0) & (mu > 0.0)):
            raise NonPositiveScore("provider returned a nonpositive score on support")
        kdiv = np.where(mu > 0.0, ratio - 1.0 - np.log(np.where(ratio > 0, ratio, 1.0)), 0.0)
        per_path += float(grid.steps[k]) * (kdiv * mu).sum(axis=1)
    return _summary(per_path)


# --- serialization -----------------------------------------------------------


def tabular_to_json(tab: TabularScore, q: RateMatrix) -> str:
    """Serialize a tabular provider, storing log-scores on graph edges only.

    Off-graph entries are dropped (they are never consumed: every intensity
    multiplies by the rate, which is zero there) and restored as 0.0 by
    ``tabular_from_json``.  An infinite clamp round-trips as null.
    """
    w = off_diagonal(q)
    edges = []
    idx_x, idx_y = np.nonzero(w > 0.0)
    for k in range(tab.log_ratios.shape[0]):
        vals = tab.log_ratios[k, idx_x, idx_y]
        edges.append([[int(x), int(y), float(v)] for x, y, v in zip(idx_x, idx_y, vals)])
    return json.dumps(
        {
            "points": [float(p) for p in tab.points],
            "n_states": int(q.size),
            "clamp": None if np.isinf(tab.clamp) else float(tab.clamp),
            "edges": edges,
        }
    )


def tabular_from_json(text: str) -> TabularScore:
    doc = json.loads(text)
    points = np.asarray(doc["points"], dtype=np.float64)
    n = int(doc["n_states"])
    n_blocks = points.size - 1
    if len(doc["edges"]) != n_blocks:
        raise OutOfRange(
            f"edge table has {len(doc['edges'])} blocks, grid implies {n_blocks}"
        )
    theta = np.zeros((n_blocks, n, n))
    for k, block in enumerate(doc["edges"]):
        for x, y, v in block:
            theta[k, int(x), int(y)] = float(v)
    clamp = np.inf if doc["clamp"] is None else float(doc["clamp"])
    return TabularScore(points, theta, clamp=clamp)


def trace_to_csv(trace) -> str:
    """Loss trace as ``iter,loss`` rows (loss = total excess over optimum)."""
    lines = ["iter,loss"]
    lines += [f"{int(it)},{float(val)!r}" for it, val in trace]
    return "\n".join(lines) + "\n"
