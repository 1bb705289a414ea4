"""Error-decomposition experiments for reverse-time samplers.

The sampling error of a score-driven reverse chain splits into three parts:
a horizon (truncation) term from starting at uniform noise instead of the
true time-T marginal, a score-mismatch term, and — for tau-leaping — a
step-size term.  Each experiment here isolates one of them on desk-scale
chains where exact answers are available, and packages the sweep into an
:class:`ExperimentReport` that serializes deterministically.

Floors: the horizon term is computed exactly by running the *exact*
backward dynamics from a uniform start,

    terminal = diag(p_delta) exp((T - delta) Q)^T diag(1/p_T) @ uniform,

and taking KL(p_delta || terminal).  The cruder candidate KL(p_T || p_inf)
is reported alongside for comparison, never subtracted.
"""

from __future__ import annotations

import itertools
import json
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import prm, samplers, score as score_mod, spectral
from .errors import OutOfRange, TooLarge
from .exact import (
    Distribution,
    Propagator,
    build_propagator,
    kl_divergence,
    point_mass,
    propagate,
    reversed_marginals,
    stationary_distribution,
    tv_distance,
    uniform,
)
from .rng import make_rng
from .statespace import (
    RateMatrix,
    StateSpace,
    asymmetric_hypercube_rate_matrix,
    grid_rate_matrix,
    hypercube_rate_matrix,
    off_diagonal,
    validate_rate_matrix,
)

EXACT_LAW_LIMIT = 64
ENUMERATION_LIMIT = 200_000
DEFAULT_TAIL_TOL = 1e-12

# rng stream indices: one per distinct random phase so experiments stay
# reproducible when an individual phase changes its draw count
STREAM_SAMPLING = 0
STREAM_BOOTSTRAP = 1
STREAM_INITIAL = 2


# --- models -------------------------------------------------------------------


@dataclass(frozen=True)
class Model:
    """A desk-scale chain with everything experiments need bundled."""

    name: str
    q: RateMatrix
    p0: Distribution
    total_time: float
    delta: float
    space: StateSpace | None = None

    @property
    def n_states(self) -> int:
        return self.q.entries.shape[0]

    def descriptor(self) -> dict:
        return {
            "name": self.name,
            "n_states": self.n_states,
            "total_time": self.total_time,
            "delta": self.delta,
            "p0": [float(v) for v in self.p0.probs],
            "symmetric": bool(self.q.symmetric),
        }


def two_state_model(total_time=2.0, delta=0.05, p0=(1.0, 0.0)) -> Model:
    q = validate_rate_matrix(np.array([[-1.0, 1.0], [1.0, -1.0]]))
    return Model("two-state", q, Distribution(np.asarray(p0, dtype=np.float64)),
                 total_time, delta)


def hypercube_model(d: int, total_time=2.0, delta=0.05) -> Model:
    space, q = hypercube_rate_matrix(d)
    return Model(f"hypercube-d{d}", q, point_mass(0, 2**d), total_time, delta, space)


def grid_model(side=3, d=2, total_time=2.0, delta=0.05) -> Model:
    space, q = grid_rate_matrix(side, d)
    return Model(f"grid-{side}x{d}", q, point_mass(0, side**d), total_time, delta, space)


def asymmetric_hypercube_model(d=2, p=0.3, total_time=2.0, delta=0.05) -> Model:
    space, q = asymmetric_hypercube_rate_matrix(d, p)
    return Model(f"asym-hypercube-d{d}-p{p}", q, point_mass(0, 2**d),
                 total_time, delta, space)


def model_suite() -> list[Model]:
    """The default desk-scale chains experiments are validated on."""
    return [
        two_state_model(),
        hypercube_model(2),
        hypercube_model(3),
        grid_model(3, 2),
        asymmetric_hypercube_model(2, 0.3),
    ]


# --- report plumbing ------------------------------------------------------------


@dataclass(frozen=True)
class SweepPoint:
    param: float
    estimate: float
    se: float | None = None  # None marks an exact (zero-Monte-Carlo) value
    lo: float | None = None
    hi: float | None = None
    extras: dict = field(default_factory=dict)

    @property
    def exact(self) -> bool:
        return self.se is None

    def interval(self) -> tuple[float, float]:
        if self.exact:
            return self.estimate, self.estimate
        return self.lo, self.hi


@dataclass
class ExperimentReport:
    kind: str
    model: dict
    sweep_name: str
    points: list
    slopes: dict = field(default_factory=dict)
    seed: int = 0
    wall_clock: float = 0.0
    notes: list = field(default_factory=list)
    violations: list = field(default_factory=list)

    def to_json(self) -> str:
        def pt(p: SweepPoint) -> dict:
            d = {"param": p.param, "estimate": p.estimate, "exact": p.exact}
            if not p.exact:
                d.update(se=p.se, lo=p.lo, hi=p.hi)
            if p.extras:
                d["extras"] = p.extras
            return d

        return json.dumps(
            {
                "kind": self.kind,
                "model": self.model,
                "sweep_name": self.sweep_name,
                "points": [pt(p) for p in self.points],
                "slopes": self.slopes,
                "seed": self.seed,
                "wall_clock_seconds": self.wall_clock,
                "notes": self.notes,
                "violations": self.violations,
            },
            indent=2,
        )

    def to_csv(self) -> str:
        """Flat per-point table; exact points carry an empty se field."""
        lines = ["param,estimate,se,lo,hi"]
        for p in self.points:
            lo, hi = p.interval()
            se = "" if p.exact else repr(float(p.se))
            lines.append(
                f"{float(p.param)!r},{float(p.estimate)!r},{se},"
                f"{float(lo)!r},{float(hi)!r}"
            )
        return "\n".join(lines) + "\n"

    def plot_data(self) -> str:
        """Two-column param/estimate text, ready for gnuplot."""
        return "\n".join(
            f"{float(p.param)!r} {float(p.estimate)!r}" for p in self.points
        ) + "\n"


def _fit_line(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """Least-squares slope, intercept, and R^2."""
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), r2


# --- truncation ------------------------------------------------------------------


def truncation_error_curve(
    q: RateMatrix,
    p0: Distribution,
    t_values,
    *,
    compute_rho: bool = True,
    mls_kwargs: dict | None = None,
) -> ExperimentReport:
    """Exact KL(p_T || uniform) over a horizon sweep, with a tail-decay fit.

    No Monte Carlo anywhere: marginals come from the dense propagator.  The
    fitted decay rate r_hat (least squares on log KL over the later half of
    the sweep) is reported next to lambda_2 and rho_hat for comparison; no
    inequality between them is asserted here.
    """
    start = time.perf_counter()
    gap = spectral.spectral_gap(q)  # raises NotSymmetric / Disconnected
    prop = build_propagator(q)
    n = q.entries.shape[0]
    ref = uniform(n)
    t_values = [float(t) for t in t_values]
    kls = [kl_divergence(propagate(prop, p0, t), ref) for t in t_values]
    points = [SweepPoint(param=t, estimate=kl) for t, kl in zip(t_values, kls)]

    slopes: dict = {"lambda_2": gap}
    notes = []
    tail = list(zip(t_values, kls))[len(t_values) // 2:]
    positive = [(t, kl) for t, kl in tail if kl > 0.0]
    if len(positive) >= 2:
        xs = np.array([t for t, _ in positive])
        ys = np.log([kl for _, kl in positive])
        slope, _, r2 = _fit_line(xs, ys)
        slopes["r_hat"] = -slope
        slopes["tail_fit_r2"] = r2
    else:
        notes.append("tail KL identically zero; decay fit skipped")
    if compute_rho:
        est = spectral.mls_constant_estimate(q, **(mls_kwargs or {}))
        slopes["rho_hat"] = est.rho_hat
    return ExperimentReport(
        kind="truncation",
        model={"n_states": n, "p0": [float(v) for v in p0.probs]},
        sweep_name="T",
        points=points,
        slopes=slopes,
        notes=notes,
        wall_clock=time.perf_counter() - start,
    )


# --- empirical KL ------------------------------------------------------------------


@dataclass(frozen=True)
class KLEstimate:
    estimate: float
    se: float
    lo: float
    hi: float
    flagged_missing_support: bool
    n_samples: int


def empirical_terminal_kl(
    samples: np.ndarray,
    reference: Distribution,
    *,
    smoothing: float = 0.5,
    n_boot: int = 1000,
    rng=None,
) -> KLEstimate:
    """Plug-in KL(reference || smoothed histogram) with a bootstrap CI.

    Matches the error bounds' direction: the exact law comes first and only
    the empirical side is add-k smoothed.  States the reference supports but
    the sample never visits are flagged (the smoothing keeps the value
    finite there).
    """
    if smoothing <= 0.0:
        raise OutOfRange("smoothing must be positive")
    ref = reference.probs
    n_states = ref.size
    samples = np.asarray(samples)
    n = samples.size
    if n < 100 * n_states:
        warnings.warn(
            f"only {n} samples for {n_states} states; KL plug-in bias may dominate",
            stacklevel=2,
        )
    counts = np.bincount(samples, minlength=n_states).astype(np.float64)
    support = ref > 0.0

    def plug_in(c: np.ndarray) -> np.ndarray:
        qhat = (c + smoothing) / (c.sum(axis=-1, keepdims=True) + smoothing * n_states)
        ratio = np.log(ref[support]) - np.log(qhat[..., support])
        return (ref[support] * ratio).sum(axis=-1)

    est = float(plug_in(counts))
    rng = make_rng(0, STREAM_BOOTSTRAP) if rng is None else rng
    boot_counts = rng.multinomial(n, counts / n, size=n_boot).astype(np.float64)
    boot = plug_in(boot_counts)
    lo, hi = np.percentile(boot, [2.5, 97.5])
    return KLEstimate(
        estimate=est,
        se=float(boot.std(ddof=1)),
        lo=float(lo),
        hi=float(hi),
        flagged_missing_support=bool(np.any((counts == 0) & support)),
        n_samples=n,
    )


# --- tau-leaping oracle law ----------------------------------------------------------


def _poisson_pmf_vector(m: float, tail_tol: float) -> np.ndarray:
    """pmf of Poisson(m) on 0..c_max where the truncated tail is < tail_tol."""
    pmf = [math.exp(-m)]
    c = 0
    while 1.0 - sum(pmf) >= tail_tol:
        c += 1
        pmf.append(pmf[-1] * m / c)
        if c > 400:  # desk-scale masses are tiny; this is a logic guard
            raise TooLarge("Poisson enumeration failed to converge")
    return np.array(pmf)


def _leap_column(
    x: int,
    mu: np.ndarray,
    dt: float,
    n: int,
    policy: str,
    space: StateSpace | None,
    tail_tol: float,
) -> tuple[np.ndarray, float, float]:
    """Exact one-step law from state x; returns (column, mass, P(collision))."""
    m = mu * dt
    targets = np.flatnonzero(m > 0.0)
    col = np.zeros(n)
    if targets.size == 0:
        col[x] = 1.0
        return col, 1.0, 0.0
    pmfs = [_poisson_pmf_vector(float(m[y]), tail_tol / targets.size) for y in targets]
    sizes = [p.size for p in pmfs]
    if np.prod(sizes) > ENUMERATION_LIMIT:
        raise TooLarge(
            f"joint Poisson enumeration needs {np.prod(sizes)} outcomes from state {x}"
        )
    p_collision = 0.0
    if policy == "displacement" and space is None:
        raise OutOfRange("displacement policy needs the state space")
    emb = space.embedding if space is not None else None
    for combo in itertools.product(*(range(s) for s in sizes)):
        prob = 1.0
        for pmf, c in zip(pmfs, combo):
            prob *= pmf[c]
        total = sum(combo)
        if total == 0:
            col[x] += prob
            continue
        if total == 1:
            y = targets[combo.index(1)]
            col[y] += prob
            continue
        p_collision += prob
        if policy == "displacement":
            counts = np.asarray(combo)
            moved = counts @ emb[targets] + (1 - total) * emb[x]
            np.clip(moved, 0, space.side - 1, out=moved)
            col[int(space.index_of(moved))] += prob
        elif policy == "uniform":
            fired = targets[[c > 0 for c in combo]]
            for y in fired:
                col[y] += prob / fired.size
        else:
            raise OutOfRange(f"unknown collision policy {policy!r}")
    mass = float(col.sum())
    return col, mass, p_collision


def tau_leaping_exact_law(
    q: RateMatrix,
    provider,
    grid: samplers.TimeGrid,
    *,
    initial: Distribution | None = None,
    space: StateSpace | None = None,
    policy: str = "displacement",
    poisson_tail_tol: float = DEFAULT_TAIL_TOL,
) -> Distribution:
    """Law of the tau-leaping chain by dynamic programming, no Monte Carlo.

    Per step and state the joint Poisson firing pattern is enumerated with
    per-target tails below ``poisson_tail_tol`` and resolved with the same
    collision policy as the sampler; each kernel column is renormalized and
    the pre-renormalization deficit is asserted small.
    """
    dist, _ = _tau_leap_dp(
        q, provider, grid, initial=initial, space=space, policy=policy,
        poisson_tail_tol=poisson_tail_tol,
    )
    return dist


def _tau_leap_dp(
    q, provider, grid, *, initial, space, policy, poisson_tail_tol
) -> tuple[Distribution, dict]:
    n = q.entries.shape[0]
    if n > EXACT_LAW_LIMIT:
        raise TooLarge(f"exact law limited to {EXACT_LAW_LIMIT} states, got {n}")
    into = off_diagonal(q)
    dist = (uniform(n) if initial is None else initial).probs.copy()
    collision_mass = 0.0  # expected number of collision steps per path
    min_mass = 1.0
    for k in range(grid.n_steps):
        s = np.full(n, grid.points[k])
        rows = provider.rows(s, np.arange(n))
        dt = float(grid.steps[k])
        kernel = np.empty((n, n))
        for x in range(n):
            mu = rows[x] * into[x]
            mu[x] = 0.0
            col, mass, p_coll = _leap_column(
                x, mu, dt, n, policy, space, poisson_tail_tol
            )
            if mass < 1.0 - 10.0 * poisson_tail_tol:
                raise TooLarge(
                    f"enumeration lost {1.0 - mass:.3e} mass at state {x}"
                )
            min_mass = min(min_mass, mass)
            kernel[:, x] = col / mass
            collision_mass += p_coll / mass * dist[x]
        dist = kernel @ dist
    info = {"collision_steps_per_path": collision_mass, "min_column_mass": min_mass}
    total = dist.sum()
    return Distribution(np.clip(dist, 0.0, None) / total), info


# --- discretization sweep -------------------------------------------------------------


def _exact_backward_terminal(
    prop: Propagator, p0: Distribution, total_time: float, delta: float,
    start: Distribution,
) -> Distribution:
    """Run `start` through the exact backward flow from time T down to delta."""
    p_hi = propagate(prop, p0, total_time).probs
    p_lo = propagate(prop, p0, delta).probs
    ker = prop.kernel(total_time - delta)  # ker[y, x] = P(X_t = y | X_0 = x)
    back = p_lo[:, None] * ker.T / p_hi[None, :]
    return Distribution(back @ start.probs)


def truncation_floors(model: Model) -> dict:
    """Both candidate horizon floors, exactly.

    "exact_backward": KL(p_delta || exact backward flow applied to uniform)
    — the operative floor (it is what a perfect sampler started from
    uniform converges to).  "forward_kl": KL(p_T || stationary), the cruder
    spectral-decay proxy, reported for comparison only.
    """
    prop = build_propagator(model.q)
    n = model.n_states
    floor_law = _exact_backward_terminal(
        prop, model.p0, model.total_time, model.delta, uniform(n)
    )
    p_delta = propagate(prop, model.p0, model.delta)
    p_end = propagate(prop, model.p0, model.total_time)
    stat = uniform(n) if model.q.symmetric else stationary_distribution(model.q)
    return {
        "exact_backward": kl_divergence(p_delta, floor_law),
        "forward_kl": kl_divergence(p_end, stat),
    }


def discretization_sweep(
    model: Model,
    kappa_values,
    *,
    n_paths: int = 0,
    grid_kind: str = "clamped",
    policy: str | None = None,
    clamp: float = np.inf,
    seed: int = 0,
    gamma: float = 1.0,
    eta: float = 1.0,
) -> ExperimentReport:
    """Tau-leaping terminal KL as a function of step scale kappa.

    With the exact score provider the score-mismatch term vanishes and the
    horizon floor is a known constant, so what is left over the sweep is the
    pure step-size error.  The law is computed by the enumeration oracle
    when the chain is small enough (n_paths = 0 forces it); otherwise by
    Monte Carlo with a bootstrap CI.  Excess KL (point minus exact-backward
    floor) is fitted log-log against kappa.
    """
    start = time.perf_counter()
    if policy is None:
        policy = "displacement" if model.space is not None else "uniform"
    prop = build_propagator(model.q)
    rev = reversed_marginals(prop, model.p0, model.total_time)
    provider = score_mod.ExactScore(rev, clamp=clamp)
    p_delta = propagate(prop, model.p0, model.delta)
    floors = truncation_floors(model)
    floor = floors["exact_backward"]
    use_oracle = model.n_states <= EXACT_LAW_LIMIT and n_paths == 0

    points = []
    for idx, kappa in enumerate(kappa_values):
        kappa = float(kappa)
        if grid_kind == "clamped":
            grid = samplers.build_time_grid(
                model.total_time, kappa=kappa, delta=model.delta,
                gamma=gamma, eta=eta,
            )
        elif grid_kind == "uniform":
            end = model.total_time - model.delta
            n_steps = max(1, math.ceil(end / kappa))
            grid = samplers.TimeGrid(np.linspace(0.0, end, n_steps + 1))
        else:
            raise OutOfRange(f"unknown grid kind {grid_kind!r}")

        if use_oracle:
            law, info = _tau_leap_dp(
                model.q, provider, grid, initial=None, space=model.space,
                policy=policy, poisson_tail_tol=DEFAULT_TAIL_TOL,
            )
            kl = kl_divergence(p_delta, law)
            points.append(
                SweepPoint(
                    param=kappa,
                    estimate=kl,
                    extras={
                        "excess_over_floor": kl - floor,
                        "collision_steps_per_path": info["collision_steps_per_path"],
                        "collision_fraction": info["collision_steps_per_path"]
                        / grid.n_steps,
                        "n_steps": grid.n_steps,
                    },
                )
            )
        else:
            run = samplers.run_tau_leaping(
                model.q, provider, grid, make_rng(seed + idx, STREAM_SAMPLING),
                n_paths=n_paths, space=model.space, policy=policy,
            )
            est = empirical_terminal_kl(
                run.batch.terminal_states(), p_delta,
                rng=make_rng(seed + idx, STREAM_BOOTSTRAP),
            )
            points.append(
                SweepPoint(
                    param=kappa,
                    estimate=est.estimate,
                    se=est.se,
                    lo=est.lo,
                    hi=est.hi,
                    extras={
                        "excess_over_floor": est.estimate - floor,
                        "collision_fraction": run.collision_fraction,
                        "n_steps": grid.n_steps,
                    },
                )
            )

    slopes = dict(floors)
    excess = np.array([p.extras["excess_over_floor"] for p in points])
    ks = np.array([p.param for p in points])
    pos = excess > 0.0
    if pos.sum() >= 2:
        slope, _, r2 = _fit_line(np.log(ks[pos]), np.log(excess[pos]))
        slopes["loglog_slope"] = slope
        slopes["loglog_r2"] = r2
    report = ExperimentReport(
        kind="discretization",
        model=model.descriptor(),
        sweep_name="kappa",
        points=points,
        slopes=slopes,
        seed=seed,
        notes=[
            f"grid_kind={grid_kind}",
            f"law={'oracle' if use_oracle else f'monte-carlo n={n_paths}'}",
            "collision fraction reported per point (not conditioned away)",
        ],
        wall_clock=time.perf_counter() - start,
    )
    return report


# --- uniformization experiments ----------------------------------------------------


def _uniform_grid(total_time: float, delta: float, blocks: int) -> samplers.TimeGrid:
    return samplers.TimeGrid(np.linspace(0.0, total_time - delta, blocks + 1))


def _score_clamp(rev, horizon: float, n_grid: int = 512) -> float:
    s = np.linspace(0.0, horizon, n_grid)
    probs = rev.at_many(s)
    return float((probs.max(axis=1) / probs.min(axis=1)).max()) * 1.05


def uniformization_exactness(
    model: Model,
    block_counts,
    *,
    n_paths: int = 100_000,
    seed: int = 0,
) -> ExperimentReport:
    """TV between uniformization output and the stopped marginal p_delta.

    The sampler is exact in law, so every block count must agree with
    p_delta and with the thinning-based reference sampler up to Monte Carlo
    noise; violations are recorded on the report.
    """
    start = time.perf_counter()
    prop = build_propagator(model.q)
    rev = reversed_marginals(prop, model.p0, model.total_time)
    horizon = model.total_time - model.delta
    provider = score_mod.ExactScore(rev, clamp=_score_clamp(rev, horizon))
    p_delta = propagate(prop, model.p0, model.delta).probs
    n = model.n_states
    mc_tol = 4.0 * math.sqrt(n / n_paths)

    points = []
    emps = []
    for idx, b in enumerate(block_counts):
        grid = _uniform_grid(model.total_time, model.delta, int(b))
        run = samplers.run_uniformization(
            model.q, provider, grid, make_rng(seed + idx, STREAM_SAMPLING),
            n_paths=n_paths,
        )
        emp = np.bincount(run.batch.terminal_states(), minlength=n) / n_paths
        emps.append(emp)
        tv = tv_distance(emp, p_delta)
        points.append(
            SweepPoint(
                param=float(b),
                estimate=tv,
                se=mc_tol / 4.0,
                lo=0.0,
                hi=mc_tol,
                extras={"mean_events": run.mean_events,
                        "bound": float(run.bounds[0])},
            )
        )

    # reference: the thinning-based exact backward sampler
    ref_batch = prm.simulate_backward_exact(
        model.q, rev, horizon, make_rng(seed + 1000, STREAM_SAMPLING),
        n_paths=n_paths,
    )
    ref_emp = np.bincount(ref_batch.terminal_states(), minlength=n) / n_paths
    ref_tv = tv_distance(ref_emp, p_delta)

    violations = []
    for p in points:
        if p.estimate > mc_tol:
            violations.append(
                f"B={p.param:g}: TV {p.estimate:.4f} above Monte Carlo tolerance {mc_tol:.4f}"
            )
    for (b1, e1), (b2, e2) in itertools.combinations(zip(block_counts, emps), 2):
        tv = tv_distance(e1, e2)
        if tv > 2.0 * mc_tol:
            violations.append(f"B={b1} vs B={b2}: TV {tv:.4f} above 2x tolerance")
    if tv_distance(ref_emp, emps[0]) > 2.0 * mc_tol:
        violations.append("uniformization disagrees with thinning reference")

    return ExperimentReport(
        kind="uniformization-exactness",
        model=model.descriptor(),
        sweep_name="blocks",
        points=points,
        slopes={"reference_sampler_tv": ref_tv, "mc_tolerance": mc_tol},
        seed=seed,
        violations=violations,
        wall_clock=time.perf_counter() - start,
    )


def _geometric_blocks(total_time: float, delta: float, *, coarse: float = 0.25,
                      shrink: float = 0.5) -> samplers.TimeGrid:
    """Blocks whose distance to the data end contracts geometrically.

    Far from the end the blocks have width `coarse`; once within one unit
    the remaining distances go 1, 1/2, 1/4, ... down to delta.  Matched to
    a dominating rate that blows up like 1/(time to the end), each late
    block contributes a constant to the event budget, so the total grows
    like log(1/delta) instead of 1/delta.
    """
    end = total_time - delta
    points = list(np.arange(0.0, total_time - 1.0, coarse)) if total_time > 1.0 else [0.0]
    dist = 1.0
    while dist > delta * (1.0 + 1e-12):
        points.append(total_time - dist)
        dist *= shrink
    pts = np.array(sorted(set(p for p in points if p < end - 1e-12)))
    pts = np.append(pts[np.concatenate(([True], np.diff(pts) > 1e-12))], end)
    return samplers.TimeGrid(pts)


def _block_bounds(model: Model, rev, grid: samplers.TimeGrid, *,
                  guard: int = 33, headroom: float = 1.1) -> np.ndarray:
    """Per-block majorant of the total reverse intensity, from exact scores."""
    into = off_diagonal(model.q)
    lam = np.empty(grid.n_steps)
    for k in range(grid.n_steps):
        sgrid = np.linspace(grid.points[k], grid.points[k + 1], guard)
        probs = rev.at_many(sgrid)
        ratios = probs[:, :, None] / np.maximum(probs, 1e-300)[:, None, :]
        lam[k] = float(np.einsum("tyx,xy->tx", ratios, into).max()) * headroom
    return lam


def uniformization_cost(
    model: Model,
    delta_values,
    *,
    n_paths: int = 20_000,
    seed: int = 0,
) -> ExperimentReport:
    """Mean realized event count against log(1/delta).

    Each sweep point runs the sampler on geometrically shrinking blocks
    with per-block intensity bounds tightened on a guard grid of exact
    scores, so the dominating rate tracks the 1/(T - s) blow-up of the
    true score and the event budget grows like log(1/delta).  A second run
    per point keeps the single global bound; its mean count must sit
    within 3 SE of the Poisson prediction (sum of bound x width).
    """
    start = time.perf_counter()
    prop = build_propagator(model.q)
    rev = reversed_marginals(prop, model.p0, model.total_time)

    points = []
    violations = []
    for idx, delta in enumerate(delta_values):
        delta = float(delta)
        grid = _geometric_blocks(model.total_time, delta)
        provider = score_mod.ExactScore(rev, clamp=_score_clamp(rev, grid.horizon))
        lam = _block_bounds(model, rev, grid)
        run = samplers.run_uniformization(
            model.q, provider, grid, make_rng(seed + idx, STREAM_SAMPLING),
            n_paths=n_paths, bounds=lam,
        )
        predicted = float((lam * grid.steps).sum())
        mean_n = run.mean_events
        se = float(run.event_counts.std(ddof=1) / math.sqrt(n_paths))

        # same blocks under the constant global bound; mean must be Poisson
        global_run = samplers.run_uniformization(
            model.q, provider, grid, make_rng(seed + idx, STREAM_INITIAL),
            n_paths=max(1000, n_paths // 10),
        )
        g_paths = global_run.event_counts.size
        g_pred = float((global_run.bounds * grid.steps).sum())
        g_se = float(global_run.event_counts.std(ddof=1) / math.sqrt(g_paths))
        g_z = (global_run.mean_events - g_pred) / max(g_se, 1e-12)
        if abs(g_z) > 3.0:
            violations.append(
                f"delta={delta:g}: global-bound mean N {global_run.mean_events:.2f} "
                f"is {g_z:.1f} SE from Poisson prediction {g_pred:.2f}"
            )

        z = abs(mean_n - predicted) / max(se, 1e-12)
        if z > 3.0:
            violations.append(
                f"delta={delta:g}: mean N {mean_n:.2f} is {z:.1f} SE from "
                f"predicted {predicted:.2f}"
            )
        points.append(
            SweepPoint(
                param=delta,
                estimate=mean_n,
                se=se,
                lo=mean_n - 2 * se,
                hi=mean_n + 2 * se,
                extras={
                    "predicted_mean": predicted,
                    "n_blocks": grid.n_steps,
                    "global_bound_mean": global_run.mean_events,
                    "global_bound_predicted": g_pred,
                    "global_bound_z": g_z,
                },
            )
        )

    xs = np.log(1.0 / np.array([p.param for p in points]))
    ys = np.array([p.estimate for p in points])
    slope, intercept, r2 = _fit_line(xs, ys)
    if slope <= 0.0:
        violations.append(f"event count does not grow with log(1/delta): slope {slope:.3f}")
    return ExperimentReport(
        kind="uniformization-cost",
        model=model.descriptor(),
        sweep_name="delta",
        points=points,
        slopes={"slope_vs_log_inv_delta": slope, "intercept": intercept, "fit_r2": r2},
        seed=seed,
        violations=violations,
        wall_clock=time.perf_counter() - start,
    )


# --- approximation error --------------------------------------------------------------


def approximation_error_experiment(
    model: Model,
    c_values,
    *,
    n_paths: int = 100_000,
    blocks: int = 16,
    seed: int = 0,
) -> ExperimentReport:
    """Score mismatch vs terminal KL under a known miscalibration.

    Scaling the exact score by c gives a provider whose mismatch is exactly
    K(c) times the integrated reverse intensity; uniformization removes the
    step-size term, so terminal KL should stay below the mismatch estimate
    plus the horizon floor, up to combined CI slack.
    """
    start = time.perf_counter()
    prop = build_propagator(model.q)
    rev = reversed_marginals(prop, model.p0, model.total_time)
    horizon = model.total_time - model.delta
    base_clamp = _score_clamp(rev, horizon)
    p_delta = propagate(prop, model.p0, model.delta)
    floor = truncation_floors(model)["exact_backward"]
    grid = _uniform_grid(model.total_time, model.delta, blocks)

    eps_batch = prm.simulate_backward_exact(
        model.q, rev, horizon, make_rng(seed, STREAM_INITIAL), n_paths=min(n_paths, 20_000)
    )

    points = []
    violations = []
    for idx, c in enumerate(c_values):
        c = float(c)
        provider = score_mod.ScaledScore(score_mod.ExactScore(rev, clamp=base_clamp), c)
        eps = score_mod.estimate_epsilon_continuous(model.q, provider, rev, eps_batch)
        run = samplers.run_uniformization(
            model.q, provider, grid, make_rng(seed + idx, STREAM_SAMPLING),
            n_paths=n_paths,
        )
        kl = empirical_terminal_kl(
            run.batch.terminal_states(), p_delta,
            rng=make_rng(seed + idx, STREAM_BOOTSTRAP),
        )
        combined_se = math.sqrt(eps.se**2 + kl.se**2)
        # the plug-in KL sits (|X|-1)/2n above the truth even at equality
        plug_in_bias = (model.n_states - 1) / (2.0 * n_paths)
        bound = eps.estimate + floor + plug_in_bias + 3.0 * combined_se
        if kl.estimate > bound:
            violations.append(
                f"c={c:g}: terminal KL {kl.estimate:.5f} exceeds "
                f"mismatch+floor bound {bound:.5f}"
            )
        kc = c - 1.0 - math.log(c)
        points.append(
            SweepPoint(
                param=c,
                estimate=kl.estimate,
                se=kl.se,
                lo=kl.lo,
                hi=kl.hi,
                extras={
                    "epsilon_hat": eps.estimate,
                    "epsilon_se": eps.se,
                    "K_of_c": kc,
                    "epsilon_per_K": eps.estimate / kc if kc > 0 else None,
                },
            )
        )

    return ExperimentReport(
        kind="approximation",
        model=model.descriptor(),
        sweep_name="c",
        points=points,
        slopes={"floor_exact_backward": floor},
        seed=seed,
        violations=violations,
        notes=[f"uniformization blocks={blocks}"],
        wall_clock=time.perf_counter() - start,
    )


# --- change-of-measure identities -------------------------------------------------------


def girsanov_identity_check(
    model: Model,
    *,
    tilts: list | None = None,
    n_paths: int = 100_000,
    c: float = 1.25,
    seed: int = 0,
) -> ExperimentReport:
    """z-scores for the three change-of-measure identities.

    1. E[Z_T[h]] = 1 over forward paths, per tilt h (h = 1 gives z = 0
       exactly since Z is identically 1).
    2. Tilted simulation vs reweighting: E_tilted[f(X_T)] = E[Z f(X_T)]
       with f the state index.
    3. Mean path score-entropy equals mean -log Z of the score ratio over
       true backward paths (same-path difference).
    """
    start = time.perf_counter()
    n = model.n_states
    if tilts is None:
        t1 = np.full((n, n), 1.3)
        t2 = 1.0 + 0.5 * ((np.arange(n)[:, None] + np.arange(n)[None, :]) % 2)
        tilts = [np.ones((n, n)), t1, t2]
    fwd = prm.ForwardIntensity(model.q)
    points = []
    violations = []

    def zscore(diff_mean: float, se: float) -> float:
        if se == 0.0:
            return 0.0 if diff_mean == 0.0 else math.inf
        return diff_mean / se

    off = off_diagonal(model.q)
    for idx, h_matrix in enumerate(tilts):
        h_matrix = np.asarray(h_matrix, dtype=np.float64)

        def h_rows(ts, xs, h=h_matrix):
            return h[xs]

        rng = make_rng(seed + idx, STREAM_SAMPLING)
        batch = prm.simulate_ctmc_forward_batch(
            model.q, model.p0, model.total_time, n_paths, rng
        )
        logz_all = prm.log_likelihood_ratio(batch, fwd.rate_rows, h_rows)
        terminal = batch.terminal_states()
        z = np.exp(logz_all)
        se_z = float(z.std(ddof=1) / math.sqrt(n_paths))
        z1 = zscore(float(z.mean() - 1.0), se_z)

        # tilted chain: off-diagonal (y, x) scaled by h[x, y]
        tilted = off * h_matrix.T
        gen = tilted.copy()
        np.fill_diagonal(gen, -tilted.sum(axis=0))
        q_tilted = validate_rate_matrix(gen)
        tb = prm.simulate_ctmc_forward_batch(
            q_tilted, model.p0, model.total_time, n_paths,
            make_rng(seed + idx, STREAM_INITIAL),
        )
        f_tilted = tb.terminal_states().astype(np.float64)
        f_re = z * terminal
        se2 = math.sqrt(
            f_tilted.var(ddof=1) / n_paths + f_re.var(ddof=1) / n_paths
        )
        z2 = zscore(float(f_tilted.mean() - f_re.mean()), se2)

        for which, zval in (("E[Z]=1", z1), ("reweighting", z2)):
            if abs(zval) > 3.0:
                violations.append(f"tilt {idx}: {which} z-score {zval:.2f}")
        points.append(
            SweepPoint(
                param=float(idx),
                estimate=z1,
                se=1.0,
                lo=z1 - 2,
                hi=z1 + 2,
                extras={"z_reweighting": z2, "mean_Z": float(z.mean())},
            )
        )

    # identity 3: score entropy vs -log Z over true backward paths
    prop = build_propagator(model.q)
    rev = reversed_marginals(prop, model.p0, model.total_time)
    horizon = model.total_time - model.delta
    back_batch = prm.simulate_backward_exact(
        model.q, rev, horizon, make_rng(seed + 500, STREAM_SAMPLING),
        n_paths=min(n_paths, 20_000),
    )
    back = prm.BackwardIntensity(model.q, rev)

    def const_ratio(ts, xs):
        return np.full((ts.size, n), c)

    pse = prm.path_score_entropy(back_batch, back.rate_rows, const_ratio)
    logz = prm.log_likelihood_ratio(back_batch, back.rate_rows, const_ratio)
    diff = pse + logz
    se3 = float(diff.std(ddof=1) / math.sqrt(diff.size))
    z3 = zscore(float(diff.mean()), se3)
    if abs(z3) > 3.0:
        violations.append(f"path-entropy identity z-score {z3:.2f}")

    return ExperimentReport(
        kind="girsanov",
        model=model.descriptor(),
        sweep_name="tilt_index",
        points=points,
        slopes={"z_path_entropy_identity": z3, "perturbation_c": c},
        seed=seed,
        violations=violations,
        wall_clock=time.perf_counter() - start,
    )
