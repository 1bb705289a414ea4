"""Jump paths, Poisson-random-measure simulation, and change of measure.

A CTMC path is a marked point process: jump times with the new state after
each jump.  Forward paths come from Gillespie simulation; exact backward
paths from thinning against an intensity upper bound.  The likelihood
ratio between the path law under a tilted intensity h * lambda and the
base law is

    log Z_T[h] = sum_jumps log h(tau_j, x_{tau_j^-}, y_j)
                 - int_0^T sum_y (h(tau, x_tau, y) - 1) lambda_tau(y) dtau,

with E[Z_T[h]] = 1 whenever h is positive and suitably integrable
(a Novikov-type condition; assumed, not checked, for the bounded
finite-state intensities used here it always holds).  The companion
functional path_score_entropy integrates sum_y K(r) mu_tau(y) with
K(r) = r - 1 - log r along a path; its expectation over backward paths
equals E[-log Z_T[s_hat/s]], the bridge between training loss and path KL.

Compensator integrals use per-segment Gauss-Legendre with 8-vs-16 node
comparison and bisection refinement to tolerance 1e-10.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .errors import BoundViolated, NegativeTime, NonPositiveRatio
from .exact import Distribution, ReversedMarginals
from .statespace import RateMatrix, off_diagonal

QUAD_TOL = 1e-10
GUARD_POINTS = 33
HEADROOM = 0.1
MAX_BOUND_RETRIES = 3

_GL8 = np.polynomial.legendre.leggauss(8)
_GL16 = np.polynomial.legendre.leggauss(16)


# --- path containers ---------------------------------------------------------


@dataclass(frozen=True)
class JumpPath:
    """One piecewise-constant trajectory on [0, horizon].

    times are strictly increasing in (0, horizon]; states[j] is the state
    entered at times[j]; consecutive states differ (no self-jumps).
    """

    x0: int
    times: np.ndarray
    states: np.ndarray
    horizon: float

    def __post_init__(self) -> None:
        t = np.asarray(self.times, dtype=np.float64)
        s = np.asarray(self.states, dtype=np.int64)
        if self.horizon < 0:
            raise NegativeTime(f"horizon {self.horizon} negative")
        if t.ndim != 1 or s.shape != t.shape:
            raise ValueError("times and states must be 1-d arrays of equal length")
        if t.size:
            if t[0] <= 0.0 or t[-1] > self.horizon:
                raise ValueError("jump times must lie in (0, horizon]")
            if np.any(np.diff(t) <= 0.0):
                raise ValueError("jump times must be strictly increasing")
            trail = np.concatenate(([self.x0], s[:-1]))
            if np.any(trail == s):
                raise ValueError("self-jumps are not allowed")
        t.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", s)

    @property
    def n_jumps(self) -> int:
        return self.times.size

    @property
    def terminal_state(self) -> int:
        return int(self.states[-1]) if self.times.size else self.x0

    def state_before(self, t: float) -> int:
        """State of the left limit x_{t^-}."""
        idx = int(np.searchsorted(self.times, t, side="left"))
        return self.x0 if idx == 0 else int(self.states[idx - 1])

    def state_at(self, t: float) -> int:
        idx = int(np.searchsorted(self.times, t, side="right"))
        return self.x0 if idx == 0 else int(self.states[idx - 1])


@dataclass(frozen=True)
class PathBatch:
    """Ragged container of many paths over a shared horizon.

    Events of path i live at flat positions offsets[i]:offsets[i+1].
    """

    x0: np.ndarray
    offsets: np.ndarray
    times: np.ndarray
    states: np.ndarray
    horizon: float

    def __post_init__(self) -> None:
        off = np.asarray(self.offsets, dtype=np.int64)
        if off.ndim != 1 or off[0] != 0 or np.any(np.diff(off) < 0):
            raise ValueError("offsets must start at 0 and be nondecreasing")
        if off[-1] != np.asarray(self.times).size:
            raise ValueError("offsets must end at the number of events")
        for name in ("x0", "offsets", "times", "states"):
            arr = np.asarray(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_paths(self) -> int:
        return self.x0.size

    def path(self, i: int) -> JumpPath:
        a, b = self.offsets[i], self.offsets[i + 1]
        return JumpPath(
            x0=int(self.x0[i]),
            times=self.times[a:b].copy(),
            states=self.states[a:b].copy(),
            horizon=self.horizon,
        )

    def jump_counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def terminal_states(self) -> np.ndarray:
        out = self.x0.astype(np.int64).copy()
        has = np.diff(self.offsets) > 0
        out[has] = self.states[self.offsets[1:][has] - 1]
        return out

    def states_at(self, t: float) -> np.ndarray:
        """State of every path at time t (right-continuous)."""
        cur = self.x0.astype(np.int64).copy()
        counts = np.diff(self.offsets)
        for r in range(int(counts.max()) if counts.size else 0):
            has = counts > r
            pos = self.offsets[:-1][has] + r
            fired = self.times[pos] <= t
            idx = np.flatnonzero(has)[fired]
            cur[idx] = self.states[pos[fired]]
        return cur

    def previous_states(self) -> np.ndarray:
        """For every event, the state the path was in just before it."""
        prev = np.empty_like(self.states)
        counts = np.diff(self.offsets)
        has = counts > 0
        starts = self.offsets[:-1][has]
        prev[starts] = self.x0[has]
        inner = np.ones(self.times.size, dtype=bool)
        inner[starts] = False
        prev[inner] = self.states[np.flatnonzero(inner) - 1]
        return prev

    def event_paths(self) -> np.ndarray:
        """For every event, the index of the path it belongs to."""
        return np.repeat(np.arange(self.n_paths), np.diff(self.offsets))


def batch_from_paths(paths: list[JumpPath]) -> PathBatch:
    horizon = paths[0].horizon
    offsets = np.concatenate(([0], np.cumsum([p.n_jumps for p in paths])))
    return PathBatch(
        x0=np.array([p.x0 for p in paths], dtype=np.int64),
        offsets=offsets,
        times=np.concatenate([p.times for p in paths]) if offsets[-1] else np.empty(0),
        states=(
            np.concatenate([p.states for p in paths]).astype(np.int64)
            if offsets[-1]
            else np.empty(0, dtype=np.int64)
        ),
        horizon=horizon,
    )


# --- intensities --------------------------------------------------------------


class EvolvingIntensity(Protocol):
    """Per-target jump intensity lambda_t(y) seen from a fixed current state.

    rates/total may depend on time; upper_bound(t0, t1, state) must majorize
    total(t, state) for all t in [t0, t1] while the state is held.
    """

    def rates(self, t: float, state: int) -> np.ndarray: ...

    def total(self, t: float, state: int) -> float: ...

    def upper_bound(self, t0: float, t1: float, state: int) -> float: ...


class ForwardIntensity:
    """Time-constant forward CTMC rates: lambda(y) = entries(y, state)."""

    def __init__(self, q: RateMatrix):
        self.off = off_diagonal(q)
        self.exit = -np.diag(q.entries)

    def rates(self, t: float, state: int) -> np.ndarray:
        return self.off[:, state]

    def total(self, t: float, state: int) -> float:
        return float(self.exit[state])

    def upper_bound(self, t0: float, t1: float, state: int) -> float:
        return float(self.exit[state])

    def rate_rows(self, ts: np.ndarray, states: np.ndarray) -> np.ndarray:
        return self.off.T[states]


class BackwardIntensity:
    """Exact reverse-time intensity mu_s(y) = (p_check_s(y)/p_check_s(x)) q(x, y).

    q(x, y) here is the forward rate y -> x, i.e. row x of the off-diagonal
    entries, so mu is column x of the backward generator at the frozen
    marginal p_check_s = p_{T-s}.
    """

    def __init__(self, q: RateMatrix, rev: ReversedMarginals):
        self.rows_into = off_diagonal(q)  # row x = rates into x
        self.rev = rev

    def rates(self, t: float, state: int) -> np.ndarray:
        p = self.rev.at(t).probs
        return (p / max(p[state], 1e-300)) * self.rows_into[state]

    def total(self, t: float, state: int) -> float:
        return float(self.rates(t, state).sum())

    def upper_bound(self, t0: float, t1: float, state: int) -> float:
        grid = np.linspace(t0, t1, GUARD_POINTS)
        probs = self.rev.at_many(grid)
        ratios = probs / np.maximum(probs[:, state], 1e-300)[:, None]
        totals = ratios @ self.rows_into[state]
        return float(totals.max()) * (1.0 + HEADROOM)

    def rate_rows(self, ts: np.ndarray, states: np.ndarray) -> np.ndarray:
        probs = self.rev.at_many(ts)
        px = probs[np.arange(ts.size), states]
        return (probs / np.maximum(px, 1e-300)[:, None]) * self.rows_into[states]


# --- forward simulation ---------------------------------------------------------


def simulate_ctmc_forward(
    q: RateMatrix, x0: int, horizon: float, rng: np.random.Generator
) -> JumpPath:
    """Gillespie: exponential holding at the exit rate, then a categorical jump."""
    if horizon < 0:
        raise NegativeTime(f"horizon {horizon} negative")
    off = off_diagonal(q)
    exit_rates = -np.diag(q.entries)
    times, states = [], []
    t, x = 0.0, x0
    while True:
        rate = exit_rates[x]
        if rate <= 0.0:
            break
        t += rng.exponential(1.0 / rate)
        if t > horizon:
            break
        col = off[:, x]
        x = int(np.searchsorted(np.cumsum(col), rng.random() * rate, side="right"))
        times.append(t)
        states.append(x)
    return JumpPath(x0=x0, times=np.array(times), states=np.array(states, dtype=np.int64), horizon=horizon)


def simulate_ctmc_forward_batch(
    q: RateMatrix,
    initial: Distribution | np.ndarray | int,
    horizon: float,
    n_paths: int,
    rng: np.random.Generator,
) -> PathBatch:
    """Vectorized Gillespie over many paths in lockstep rounds."""
    if horizon < 0:
        raise NegativeTime(f"horizon {horizon} negative")
    n = q.size
    off = off_diagonal(q)
    exit_rates = -np.diag(q.entries)
    col_cum = np.cumsum(off, axis=0).T  # row x = cumulative rates out of x
    if isinstance(initial, Distribution):
        x0 = rng.choice(n, size=n_paths, p=initial.probs)
    elif np.ndim(initial) == 0:
        x0 = np.full(n_paths, int(initial), dtype=np.int64)
    else:
        x0 = np.asarray(initial, dtype=np.int64)
    cur = x0.copy()
    t = np.zeros(n_paths)
    active = exit_rates[cur] > 0.0
    ev_path: list[np.ndarray] = []
    ev_time: list[np.ndarray] = []
    ev_state: list[np.ndarray] = []
    while active.any():
        idx = np.flatnonzero(active)
        rate = exit_rates[cur[idx]]
        t[idx] += rng.exponential(1.0, size=idx.size) / rate
        alive = t[idx] <= horizon
        idx = idx[alive]
        if idx.size == 0:
            break
        u = rng.random(idx.size) * exit_rates[cur[idx]]
        nxt = (col_cum[cur[idx]] <= u[:, None]).sum(axis=1)
        cur[idx] = nxt
        ev_path.append(idx.copy())
        ev_time.append(t[idx].copy())
        ev_state.append(nxt.astype(np.int64))
        active = np.zeros(n_paths, dtype=bool)
        active[idx] = exit_rates[nxt] > 0.0
    return batch_from_events(x0, ev_path, ev_time, ev_state, n_paths, horizon)


def batch_from_events(x0, ev_path, ev_time, ev_state, n_paths, horizon) -> PathBatch:
    """Build a PathBatch from unordered per-chunk event triples.

    Each argument is a list of arrays (any chunking); events are sorted by
    (path, time) before assembly.
    """
    if ev_path:
        path_idx = np.concatenate(ev_path)
        times = np.concatenate(ev_time)
        states = np.concatenate(ev_state)
        order = np.lexsort((times, path_idx))
        path_idx, times, states = path_idx[order], times[order], states[order]
        counts = np.bincount(path_idx, minlength=n_paths)
    else:
        times = np.empty(0)
        states = np.empty(0, dtype=np.int64)
        counts = np.zeros(n_paths, dtype=np.int64)
    offsets = np.concatenate(([0], np.cumsum(counts)))
    return PathBatch(x0=x0, offsets=offsets, times=times, states=states, horizon=horizon)


# --- thinning -------------------------------------------------------------------


def sample_next_jump(
    intensity: EvolvingIntensity,
    t0: float,
    state: int,
    horizon: float,
    rng: np.random.Generator,
) -> tuple[float, int] | None:
    """First jump of a thinned Poisson clock after t0, or None past the horizon.

    Proposes at the declared upper bound and accepts with probability
    total/bound; raises BoundViolated if the evaluated total ever exceeds
    the bound.
    """
    bound = intensity.upper_bound(t0, horizon, state)
    if bound <= 0.0:
        return None
    t = t0
    while True:
        t += rng.exponential(1.0 / bound)
        if t > horizon:
            return None
        lam = intensity.rates(t, state)
        total = float(lam.sum())
        if total > bound * (1.0 + 1e-9):
            raise BoundViolated(
                f"total intensity {total} exceeds declared bound {bound} at t={t}"
            )
        if rng.random() * bound < total:
            y = int(np.searchsorted(np.cumsum(lam), rng.random() * total, side="right"))
            return t, y


def simulate_backward_exact(
    q: RateMatrix,
    rev: ReversedMarginals,
    horizon: float,
    rng: np.random.Generator,
    *,
    initial: Distribution | None = None,
    n_paths: int = 1,
    guard_points: int = GUARD_POINTS,
    headroom: float = HEADROOM,
) -> PathBatch:
    """Exact reverse-time paths over [0, horizon] by global thinning.

    horizon is in reverse time, typically T - delta.  Paths start from the
    reverse initial law p_check_0 = p_T unless `initial` overrides it.  The
    proposal bound is (guard-grid max score) * (1 + headroom) * max exit
    rate; a violation doubles the headroom and retries, at most
    MAX_BOUND_RETRIES times.
    """
    if not 0.0 <= horizon <= rev.horizon:
        raise NegativeTime(f"horizon {horizon} outside [0, {rev.horizon}]")
    p_start = initial if initial is not None else rev.at(0.0)
    head = headroom
    for attempt in range(MAX_BOUND_RETRIES + 1):
        try:
            return _backward_thinning(
                q, rev, horizon, rng, p_start, n_paths, guard_points, head
            )
        except BoundViolated:
            if attempt == MAX_BOUND_RETRIES:
                raise
            head = 2.0 * head + 1.0


def _backward_thinning(q, rev, horizon, rng, p_start, n_paths, guard_points, headroom):
    n = q.size
    rows_into = off_diagonal(q)  # row x = forward rates into x = backward rates out
    grid = np.linspace(0.0, horizon, guard_points)
    probs = rev.at_many(grid)
    edge_dst, edge_src = np.nonzero(rows_into > 0)  # mu(y)>0 needs entries(x,y)>0
    max_score = (probs[:, edge_src] / np.maximum(probs[:, edge_dst], 1e-300)).max()
    bound = float(max_score) * (1.0 + headroom) * q.max_exit_rate
    x0 = rng.choice(n, size=n_paths, p=p_start.probs)
    cur = x0.copy()
    t = np.zeros(n_paths)
    alive = np.ones(n_paths, dtype=bool)
    ev_path: list[np.ndarray] = []
    ev_time: list[np.ndarray] = []
    ev_state: list[np.ndarray] = []
    while alive.any():
        idx = np.flatnonzero(alive)
        t[idx] += rng.exponential(1.0 / bound, size=idx.size)
        done = t[idx] > horizon
        alive[idx[done]] = False
        idx = idx[~done]
        if idx.size == 0:
            break
        mv = rev.at_many(t[idx])
        px = mv[np.arange(idx.size), cur[idx]]
        lam = (mv / np.maximum(px, 1e-300)[:, None]) * rows_into[cur[idx]]
        totals = lam.sum(axis=1)
        if np.any(totals > bound * (1.0 + 1e-9)):
            raise BoundViolated(
                f"backward intensity {totals.max():.3e} exceeded bound {bound:.3e}"
            )
        u = rng.random(idx.size) * bound
        accept = u < totals
        jdx = idx[accept]
        if jdx.size:
            cum = np.cumsum(lam[accept], axis=1)
            pick = rng.random(jdx.size) * totals[accept]
            nxt = (cum <= pick[:, None]).sum(axis=1)
            cur[jdx] = nxt
            ev_path.append(jdx.copy())
            ev_time.append(t[jdx].copy())
            ev_state.append(nxt.astype(np.int64))
    return batch_from_events(x0, ev_path, ev_time, ev_state, n_paths, horizon)


# --- path functionals -------------------------------------------------------------


def integrate_along_paths(
    batch: PathBatch,
    integrand: Callable[[np.ndarray, np.ndarray], np.ndarray],
    *,
    tol: float = QUAD_TOL,
    max_depth: int = 40,
) -> np.ndarray:
    """Per-path integral of integrand(t, state_t) dt over [0, horizon].

    The integrand is called with flat arrays (times, states) and must
    return values of the same length.  Each inter-jump segment gets
    16-node Gauss-Legendre, accepted when it agrees with the 8-node rule
    within a length-proportional share of tol, else bisected.
    """
    n_paths = batch.n_paths
    horizon = batch.horizon
    counts = np.diff(batch.offsets)
    n_seg = counts + 1
    seg_path = np.repeat(np.arange(n_paths), n_seg)
    total_segs = int(n_seg.sum())
    arange = np.arange(n_paths)
    # segment lefts are [0, times...] per path, rights are [times..., horizon],
    # states are [x0, states...]; all three assembled without a ragged loop
    first_idx = batch.offsets[:-1] + arange
    last_idx = batch.offsets[1:] + arange
    a = np.empty(total_segs)
    b = np.empty(total_segs)
    state = np.empty(total_segs, dtype=np.int64)
    inner = np.ones(total_segs, dtype=bool)
    inner[first_idx] = False
    a[first_idx] = 0.0
    a[inner] = batch.times
    state[first_idx] = batch.x0
    state[inner] = batch.states
    inner = np.ones(total_segs, dtype=bool)
    inner[last_idx] = False
    b[last_idx] = horizon
    b[inner] = batch.times
    out = np.zeros(n_paths)
    scale = max(horizon, 1e-300)
    for _ in range(max_depth):
        if a.size == 0:
            break
        length = b - a
        mid = 0.5 * (a + b)
        half = 0.5 * length
        t16 = mid[:, None] + half[:, None] * _GL16[0][None, :]
        t8 = mid[:, None] + half[:, None] * _GL8[0][None, :]
        f16 = integrand(t16.ravel(), np.repeat(state, 16)).reshape(-1, 16)
        f8 = integrand(t8.ravel(), np.repeat(state, 8)).reshape(-1, 8)
        i16 = (f16 @ _GL16[1]) * half
        i8 = (f8 @ _GL8[1]) * half
        err = np.abs(i16 - i8)
        ok = err <= tol * np.maximum(length / scale, 1e-16)
        np.add.at(out, seg_path[ok], i16[ok])
        keep = ~ok
        if not keep.any():
            break
        a0, b0, m0 = a[keep], b[keep], mid[keep]
        a = np.concatenate([a0, m0])
        b = np.concatenate([m0, b0])
        state = np.concatenate([state[keep], state[keep]])
        seg_path = np.concatenate([seg_path[keep], seg_path[keep]])
    else:
        raise RuntimeError("quadrature failed to converge; integrand too rough")
    return out


def log_likelihood_ratio(
    batch: PathBatch | JumpPath,
    rate_rows: Callable[[np.ndarray, np.ndarray], np.ndarray],
    h_rows: Callable[[np.ndarray, np.ndarray], np.ndarray],
    *,
    tol: float = QUAD_TOL,
) -> np.ndarray | float:
    """log Z_T[h] per path: jump terms minus the (h-1) compensator.

    rate_rows(times, states) -> (k, n) base intensity rows; h_rows likewise
    for the multiplicative tilt.  h must be strictly positive wherever the
    base intensity is positive (NonPositiveRatio otherwise).
    """
    single = isinstance(batch, JumpPath)
    if single:
        batch = batch_from_paths([batch])

    prev = batch.previous_states()
    hvals = (
        h_rows(batch.times, prev)[np.arange(batch.times.size), batch.states]
        if batch.times.size
        else np.empty(0)
    )
    if np.any(hvals <= 0.0):
        raise NonPositiveRatio("h vanished or went negative at a realized jump")
    jump_sum = np.zeros(batch.n_paths)
    np.add.at(jump_sum, batch.event_paths(), np.log(hvals))

    def integrand(ts: np.ndarray, xs: np.ndarray) -> np.ndarray:
        lam = rate_rows(ts, xs)
        h = h_rows(ts, xs)
        if np.any((h <= 0.0) & (lam > 0.0)):
            raise NonPositiveRatio("h must stay positive where the intensity is positive")
        return ((h - 1.0) * lam).sum(axis=1)

    comp = integrate_along_paths(batch, integrand, tol=tol)
    out = jump_sum - comp
    return float(out[0]) if single else out


def path_score_entropy(
    batch: PathBatch | JumpPath,
    mu_rows: Callable[[np.ndarray, np.ndarray], np.ndarray],
    ratio_rows: Callable[[np.ndarray, np.ndarray], np.ndarray],
    *,
    tol: float = QUAD_TOL,
) -> np.ndarray | float:
    """Per-path integral of sum_y K(ratio) mu(y) dt with K(r) = r - 1 - log(r).

    mu_rows gives the reference (true backward) intensity rows; ratio_rows
    the pointwise s_hat/s ratios.  K is evaluated only where mu > 0.
    """
    single = isinstance(batch, JumpPath)
    if single:
        batch = batch_from_paths([batch])

    def integrand(ts: np.ndarray, xs: np.ndarray) -> np.ndarray:
        mu = mu_rows(ts, xs)
        r = ratio_rows(ts, xs)
        if np.any((r <= 0.0) & (mu > 0.0)):
            raise NonPositiveRatio("score ratio must stay positive on the support")
        k = np.where(mu > 0.0, r - 1.0 - np.log(np.where(r > 0.0, r, 1.0)), 0.0)
        return (k * mu).sum(axis=1)

    out = integrate_along_paths(batch, integrand, tol=tol)
    return float(out[0]) if single else out


# --- serialization ------------------------------------------------------------------


def path_to_csv(path: JumpPath) -> str:
    buf = io.StringIO()
    buf.write(f"# x0={path.x0} horizon={float(path.horizon)!r}\n")
    buf.write("time,state\n")
    for t, s in zip(path.times, path.states):
        buf.write(f"{float(t)!r},{int(s)}\n")
    return buf.getvalue()


def path_from_csv(text: str) -> JumpPath:
    lines = [ln for ln in text.strip().splitlines() if ln]
    meta = dict(part.split("=") for part in lines[0].lstrip("# ").split())
    if lines[1] != "time,state":
        raise ValueError(f"expected header 'time,state', got {lines[1]!r}")
    rows = [ln.split(",") for ln in lines[2:]]
    return JumpPath(
        x0=int(meta["x0"]),
        times=np.array([float(r[0]) for r in rows]),
        states=np.array([int(r[1]) for r in rows], dtype=np.int64),
        horizon=float(meta["horizon"]),
    )


def batch_to_jsonl(batch: PathBatch) -> str:
    lines = []
    for i in range(batch.n_paths):
        a, b = batch.offsets[i], batch.offsets[i + 1]
        lines.append(
            json.dumps(
                {
                    "x0": int(batch.x0[i]),
                    "times": [float(t) for t in batch.times[a:b]],
                    "states": [int(s) for s in batch.states[a:b]],
                    "horizon": float(batch.horizon),
                }
            )
        )
    return "\n".join(lines) + "\n"


def batch_from_jsonl(text: str) -> PathBatch:
    paths = []
    for line in text.strip().splitlines():
        doc = json.loads(line)
        paths.append(
            JumpPath(
                x0=doc["x0"],
                times=np.array(doc["times"]),
                states=np.array(doc["states"], dtype=np.int64),
                horizon=doc["horizon"],
            )
        )
    return batch_from_paths(paths)
