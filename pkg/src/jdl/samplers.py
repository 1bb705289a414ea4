"""Grid-based reverse-time samplers: tau-leaping and uniformization.

Both samplers run in the reverse clock s in [0, T - delta] (s = 0 is the
noisy end, physical time t = T - s) and consume score estimates through the
:class:`ScoreRows` protocol.  The reverse intensity out of x is assembled as

    mu_s(y) = rows(s, x)[y] * q(y -> x),

i.e. the provider's mass-ratio estimate times the forward rate into x.

The step grid is produced by :func:`build_time_grid`, which enforces

    s_{k+1} - s_k <= kappa * max(1, (T - s_{k+1})**(1 + gamma - eta)),

so steps can be long while far from the data end and shrink to uniform
length kappa once T - s <= 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .errors import (
    BoundViolated,
    EmptyGrid,
    NegativeTime,
    OutOfRange,
    StepUnderflow,
)
from .exact import Distribution, uniform
from .prm import PathBatch, batch_from_events
from .statespace import RateMatrix, StateSpace, off_diagonal

#: relative slack allowed before a uniformization bound counts as violated
BOUND_SLACK = 1e-9

#: a grid step shorter than this aborts construction
MIN_STEP = 1e-12

DEFAULT_MAX_POINTS = 1_000_000


class ScoreRows(Protocol):
    """Anything that can produce clamped mass-ratio rows in reverse time.

    ``rows(s, states)[j, y]`` estimates p_{T - s[j]}(y) / p_{T - s[j]}(x_j),
    clipped to ``clamp``; entries must be finite and nonnegative.  ``clamp``
    itself must be finite for uniformization bounds to exist.
    """

    clamp: float

    def rows(self, s: np.ndarray, states: np.ndarray) -> np.ndarray: ...


# --- time grids -------------------------------------------------------------


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing reverse-time grid starting at 0.

    The construction parameters are carried along (None for hand-built
    grids) so downstream reports can record how a grid was made.
    """

    points: np.ndarray
    kind: str = "custom"
    kappa: float | None = None
    gamma: float | None = None
    eta: float | None = None
    delta: float | None = None
    total_time: float | None = None

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        object.__setattr__(self, "points", pts)
        if pts.ndim != 1 or pts.size < 2:
            raise EmptyGrid("grid needs at least two points")
        if pts[0] != 0.0:
            raise OutOfRange("grid must start at 0")
        if not np.all(np.diff(pts) > 0.0):
            raise OutOfRange("grid points must be strictly increasing")

    @property
    def n_steps(self) -> int:
        return self.points.size - 1

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.points)

    @property
    def horizon(self) -> float:
        return float(self.points[-1])


def suggested_delta(total_time: float, scheme: str, gamma: float = 1.0) -> float:
    """Early-stopping margin: 0 when gamma < 1, otherwise scheme-dependent."""
    if gamma < 1.0:
        return 0.0
    if scheme == "tau-leap":
        return float(np.exp(-np.sqrt(total_time)))
    if scheme == "uniformization":
        return float(np.exp(-total_time))
    raise OutOfRange(f"unknown scheme {scheme!r}")


def build_time_grid(
    total_time: float,
    *,
    kappa: float,
    delta: float = 0.0,
    gamma: float = 1.0,
    eta: float = 1.0,
    max_points: int = DEFAULT_MAX_POINTS,
) -> TimeGrid:
    """Greedy maximal grid on [0, T - delta] under the step-size clamp.

    Each new point is the largest s' with s' - s <= kappa * max(1,
    (T - s')**(1 + gamma - eta)), found by bisection (the right-hand side
    decreases in s', so the constraint function is monotone).  The shrink
    exponent eta tempers the early, far-from-data steps; near the end the
    1-or-larger clamp floors the allowed step at kappa.
    """
    if total_time <= 0.0:
        raise EmptyGrid("total_time must be positive")
    if delta < 0.0:
        raise NegativeTime("delta must be nonnegative")
    if kappa <= 0.0:
        raise StepUnderflow("kappa must be positive")
    if not 0.0 <= gamma <= 1.0:
        raise OutOfRange("gamma must lie in [0, 1]")
    if not gamma <= eta <= 1.0:
        raise OutOfRange("eta must lie in [gamma, 1]")
    end = total_time - delta
    if end <= 0.0:
        raise EmptyGrid("delta >= total_time leaves an empty grid")

    a = 1.0 + gamma - eta

    def allowed(s_next: float) -> float:
        return kappa * max(1.0, (total_time - s_next) ** a)

    points = [0.0]
    while True:
        s = points[-1]
        if end - s <= allowed(end):
            points.append(end)
            break
        lo, hi = s, end  # allowed(lo) > 0 so the constraint holds at lo
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if mid - s <= allowed(mid):
                lo = mid
            else:
                hi = mid
        if lo - s < MIN_STEP:
            raise StepUnderflow("grid step underflowed; increase kappa or delta")
        points.append(lo)
        if len(points) > max_points:
            raise StepUnderflow(f"grid exceeded {max_points} points")
    return TimeGrid(
        np.array(points), kind="shrinking", kappa=kappa, gamma=gamma, eta=eta,
        delta=delta, total_time=total_time,
    )


def grid_satisfies_clamp(
    grid: TimeGrid,
    total_time: float,
    *,
    kappa: float,
    gamma: float = 1.0,
    eta: float = 1.0,
    rel_tol: float = 1e-12,
) -> bool:
    """Check every step of an arbitrary grid against the size clamp."""
    a = 1.0 + gamma - eta
    bound = kappa * np.maximum(1.0, (total_time - grid.points[1:]) ** a)
    return bool(np.all(grid.steps <= bound * (1.0 + rel_tol)))


# --- shared helpers ----------------------------------------------------------


def _draw_initial(initial: Distribution | None, n_states: int, n_paths: int, rng) -> np.ndarray:
    dist = uniform(n_states) if initial is None else initial
    if dist.probs.size != n_states:
        raise OutOfRange("initial distribution size does not match the chain")
    cum = np.cumsum(dist.probs)
    return (cum[None, :] <= rng.random(n_paths)[:, None]).sum(axis=1)


def _reverse_rows(provider: ScoreRows, into_rows: np.ndarray, s: np.ndarray,
                  states: np.ndarray) -> np.ndarray:
    rows = provider.rows(s, states)
    if rows.shape != (states.size, into_rows.shape[0]):
        raise OutOfRange("provider.rows returned the wrong shape")
    return rows * into_rows[states]


# --- tau-leaping --------------------------------------------------------------


@dataclass(frozen=True)
class TauLeapRun:
    """Paths plus per-path collision counts from a tau-leaping run."""

    batch: PathBatch
    collisions: np.ndarray
    grid: TimeGrid

    @property
    def collision_fraction(self) -> float:
        """Fraction of (path, step) cells in which two or more clocks fired."""
        return float(self.collisions.sum()) / (self.batch.n_paths * self.grid.n_steps)


def tau_leaping_step(
    states: np.ndarray,
    mu_rows: np.ndarray,
    dt: float,
    rng,
    *,
    space: StateSpace | None = None,
    policy: str = "displacement",
) -> tuple[np.ndarray, np.ndarray]:
    """One frozen-intensity leap: fire Poisson(mu * dt) clocks per target.

    Exactly one firing moves there; two or more is a collision, resolved by

    * ``"displacement"`` — add up all fired moves as embedding displacements
      and clip coordinatewise to the grid box (needs ``space``);
    * ``"uniform"`` — jump to one of the distinct fired targets, chosen
      uniformly.

    Returns (new_states, collided) where collided flags the multi-fire rows.
    """
    counts = rng.poisson(mu_rows * dt)
    totals = counts.sum(axis=1)
    new = states.copy()
    collided = totals >= 2

    single = totals == 1
    if single.any():
        new[single] = np.argmax(counts[single], axis=1)

    if collided.any():
        multi = np.flatnonzero(collided)
        if policy == "displacement":
            if space is None:
                raise OutOfRange("displacement policy needs the state space")
            emb = space.embedding
            moved = counts[multi] @ emb + (1 - totals[multi])[:, None] * emb[states[multi]]
            np.clip(moved, 0, space.side - 1, out=moved)
            new[multi] = space.index_of(moved)
        elif policy == "uniform":
            fired = counts[multi] > 0
            n_distinct = fired.sum(axis=1)
            pick = np.floor(rng.random(multi.size) * n_distinct).astype(np.int64)
            np.minimum(pick, n_distinct - 1, out=pick)  # guard the r -> 1 edge
            cum = np.cumsum(fired, axis=1)
            new[multi] = (cum <= pick[:, None]).sum(axis=1)
        else:
            raise OutOfRange(f"unknown collision policy {policy!r}")
    return new, collided


def run_tau_leaping(
    q: RateMatrix,
    provider: ScoreRows,
    grid: TimeGrid,
    rng,
    *,
    n_paths: int,
    initial: Distribution | None = None,
    space: StateSpace | None = None,
    policy: str = "displacement",
) -> TauLeapRun:
    """Reverse-time tau-leaping along a grid, scores frozen at left endpoints."""
    n = q.entries.shape[0]
    into = off_diagonal(q)
    states = _draw_initial(initial, n, n_paths, rng)
    x0 = states.copy()
    collisions = np.zeros(n_paths, dtype=np.int64)
    ev_path, ev_time, ev_state = [], [], []
    for k in range(grid.n_steps):
        s_left = np.full(n_paths, grid.points[k])
        mu = _reverse_rows(provider, into, s_left, states)
        new, collided = tau_leaping_step(
            states, mu, float(grid.steps[k]), rng, space=space, policy=policy
        )
        collisions += collided
        moved = new != states
        if moved.any():
            ev_path.append(np.flatnonzero(moved))
            ev_time.append(np.full(int(moved.sum()), grid.points[k + 1]))
            ev_state.append(new[moved].astype(np.int64))
        states = new
    batch = batch_from_events(x0, ev_path, ev_time, ev_state, n_paths, grid.horizon)
    return TauLeapRun(batch=batch, collisions=collisions, grid=grid)


# --- uniformization ------------------------------------------------------------


@dataclass(frozen=True)
class UniformizationRun:
    """Paths plus bookkeeping from an exact uniformization run."""

    batch: PathBatch
    event_counts: np.ndarray  # per path, self-loops included
    bounds: np.ndarray  # per block
    grid: TimeGrid

    @property
    def mean_events(self) -> float:
        return float(self.event_counts.mean())


def intensity_upper_bound(q: RateMatrix, provider: ScoreRows) -> float:
    """Global reverse-intensity bound: score clamp times the worst exit rate."""
    if not np.isfinite(provider.clamp):
        raise OutOfRange("uniformization needs a provider with a finite clamp")
    return float(provider.clamp * q.max_exit_rate)


def run_uniformization(
    q: RateMatrix,
    provider: ScoreRows,
    grid: TimeGrid,
    rng,
    *,
    n_paths: int,
    initial: Distribution | None = None,
    bounds: np.ndarray | float | None = None,
) -> UniformizationRun:
    """Exact-in-law reverse sampling by thinning a dominating Poisson clock.

    Each grid step [s_k, s_{k+1}) is a block with its own dominating rate
    ``bounds[k]`` (default: the global clamp-times-exit-rate bound).  Events
    arrive as Poisson(bound * dt) sorted uniforms; at each one the chain
    jumps to y with probability mu(y)/bound and self-loops with the leftover
    mass.  If the evaluated intensity ever exceeds the block bound the run
    stops with BoundViolated — the law would silently be wrong otherwise.
    """
    n = q.entries.shape[0]
    into = off_diagonal(q)
    if bounds is None:
        lam = np.full(grid.n_steps, intensity_upper_bound(q, provider))
    else:
        lam = np.broadcast_to(np.asarray(bounds, dtype=np.float64), (grid.n_steps,)).copy()
    if np.any(lam <= 0.0) or not np.all(np.isfinite(lam)):
        raise OutOfRange("block bounds must be positive and finite")

    states = _draw_initial(initial, n, n_paths, rng)
    x0 = states.copy()
    event_counts = np.zeros(n_paths, dtype=np.int64)
    ev_path, ev_time, ev_state = [], [], []

    for k in range(grid.n_steps):
        s_lo, dt = float(grid.points[k]), float(grid.steps[k])
        counts = rng.poisson(lam[k] * dt, n_paths)
        event_counts += counts
        total = int(counts.sum())
        if total == 0:
            continue
        path_of = np.repeat(np.arange(n_paths), counts)
        raw = s_lo + rng.random(total) * dt
        if k == 0:
            # JumpPath needs times strictly positive; u = 0.0 is possible
            raw[raw == 0.0] = np.nextafter(0.0, 1.0)
        order = np.lexsort((raw, path_of))
        times = raw[order]  # per-path ascending
        offsets = np.concatenate(([0], np.cumsum(counts)))

        for r in range(int(counts.max())):
            active = np.flatnonzero(counts > r)
            t_r = times[offsets[active] + r]
            x_r = states[active]
            mu = _reverse_rows(provider, into, t_r, x_r)
            tot = mu.sum(axis=1)
            if np.any(tot > lam[k] * (1.0 + BOUND_SLACK)):
                worst = float(tot.max())
                raise BoundViolated(
                    f"block {k}: intensity {worst:.6g} exceeds bound {lam[k]:.6g}"
                )
            pick = rng.random(active.size) * lam[k]
            jumped = pick < tot
            if jumped.any():
                cum = np.cumsum(mu[jumped], axis=1)
                nxt = (cum <= pick[jumped, None]).sum(axis=1)
                idx = active[jumped]
                states[idx] = nxt
                ev_path.append(idx)
                ev_time.append(t_r[jumped])
                ev_state.append(nxt.astype(np.int64))

    batch = batch_from_events(x0, ev_path, ev_time, ev_state, n_paths, grid.horizon)
    return UniformizationRun(batch=batch, event_counts=event_counts, bounds=lam, grid=grid)
