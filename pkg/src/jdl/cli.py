"""Command-line front end: flat-key config, deterministic runs, file artifacts.

Subcommand grammar::

    jdl simulate-forward
    jdl sample [tau-leaping|uniformization]
    jdl spectral
    jdl train-score
    jdl experiment [truncation|discretization|uniformization-exactness|
                    approximation|girsanov]

Configuration sources, highest precedence first: command-line flags, a
--config JSON file of flat keys, the JDL_SEED environment variable (seed
only), documented defaults.  Unknown config keys are hard errors; every
range error names the offending key.  The fully resolved configuration is
echoed to <out>/resolved-config.json and a manifest (config hash, seed,
library versions, wall clock) to <out>/manifest.json.  Given the resolved
config and seed, every output byte is reproducible except the wall-clock
field of the manifest.

Exit codes: 0 success; 1 a scientific assertion failed (the failing
invariant and sweep point are printed); 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import difflib
import hashlib
import json
import math
import platform
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

from . import __version__, analysis, prm, samplers, score, spectral
from .errors import EmptyGrid, Error, MissingFile, OutOfRange, TooLarge, UnknownKey
from .exact import (
    Distribution,
    build_propagator,
    propagate,
    reversed_marginals,
    stationary_distribution,
    tv_distance,
    uniform,
)
from .rng import make_rng
from .statespace import off_diagonal, rate_matrix_from_json

COMMANDS = ("simulate-forward", "sample", "spectral", "train-score", "experiment")
ALGORITHMS = ("tau-leaping", "uniformization")
EXPERIMENTS = (
    "truncation",
    "discretization",
    "uniformization-exactness",
    "approximation",
    "girsanov",
)
MODEL_NAMES = ("two-state", "hypercube", "grid", "asym-hypercube")
SCORES = ("exact", "perturbed", "tabular")
POLICIES = ("auto", "displacement", "uniform")


# --- config keys ----------------------------------------------------------------


@dataclass(frozen=True)
class _Key:
    typ: str  # int | float | str | floats | ints
    default: object
    check: object  # predicate on the coerced value (None: validated specially)
    msg: str  # requirement text for OutOfRange messages
    help: str


def _finite_pos(v):
    return math.isfinite(v) and v > 0.0


KEYS: dict[str, _Key] = {
    "model": _Key(
        "str", "two-state", None, "",
        "built-in chain (two-state|hypercube|grid|asym-hypercube) or a .json "
        "rate-matrix file (entries/size/embedding, optional p0; p0 defaults "
        "to uniform)",
    ),
    "d": _Key("int", 2, lambda v: 1 <= v <= 10,
              "must be an integer in [1, 10]", "dimension of hypercube / grid models"),
    "side": _Key("int", 3, lambda v: v >= 2,
                 "must be an integer >= 2", "side length of the grid model"),
    "p": _Key("float", 0.3, lambda v: 0.0 < v < 1.0,
              "must lie strictly inside (0, 1)", "bias of the asymmetric hypercube"),
    "T": _Key("float", 2.0, _finite_pos,
              "must be a positive finite number", "forward horizon"),
    "delta": _Key("float", 0.05, lambda v: math.isfinite(v) and v >= 0.0,
                  "must be nonnegative and finite", "early-stopping offset"),
    "kappa": _Key("float", 0.1, _finite_pos,
                  "must be a positive finite number", "step-size scale of the clamped grid"),
    "gamma": _Key("float", 1.0, lambda v: 0.0 <= v <= 1.0,
                  "must lie in [0, 1]", "step-clamp shrink exponent"),
    "eta": _Key("float", 1.0, lambda v: 0.0 <= v <= 1.0,
                "must lie in [0, 1] and be >= gamma", "step-clamp tempering exponent"),
    "M": _Key("float", math.inf, lambda v: v > 0.0,
              "must be positive (JSON null or \"inf\" means unclamped)",
              "score clamp; unclamped scores get an automatic finite bound "
              "under uniformization"),
    "n_paths": _Key("int", 10_000, lambda v: v >= 1,
                    "must be a positive integer", "Monte Carlo path count"),
    "seed": _Key("int", 0, lambda v: v >= 0,
                 "must be a nonnegative integer", "master seed for every RNG stream"),
    "score": _Key("str", "exact", lambda v: v in SCORES,
                  f"must be one of {list(SCORES)}",
                  "score provider for backward sampling"),
    "c": _Key("float", 1.25, _finite_pos,
              "must be a positive finite number",
              "miscalibration factor (perturbed score, girsanov reference ratio)"),
    "blocks": _Key("int", 16, lambda v: v >= 1,
                   "must be a positive integer", "uniformization block count"),
    "policy": _Key("str", "auto", lambda v: v in POLICIES,
                   f"must be one of {list(POLICIES)}",
                   "tau-leaping collision policy (auto: displacement when the "
                   "model has an embedding)"),
    "train_iters": _Key("int", 2000, lambda v: v >= 1,
                        "must be a positive integer", "gradient steps for score training"),
    "threads": _Key("int", 0, lambda v: v >= 0,
                    "must be a nonnegative integer (0: library default)",
                    "cap on BLAS worker threads"),
    "algorithm": _Key("str", "tau-leaping", lambda v: v in ALGORITHMS,
                      f"must be one of {list(ALGORITHMS)}",
                      "sample variant when none is given on the command line"),
    "experiment": _Key("str", "", lambda v: v == "" or v in EXPERIMENTS,
                       f"must be one of {list(EXPERIMENTS)}",
                       "experiment variant when none is given on the command line"),
    "t_values": _Key("floats", [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0],
                     lambda v: all(_finite_pos(x) for x in v)
                     and all(b > a for a, b in zip(v, v[1:])),
                     "must be strictly increasing positive numbers",
                     "horizon sweep for the truncation experiment"),
    "kappa_values": _Key("floats", [0.2, 0.1, 0.05, 0.025],
                         lambda v: all(_finite_pos(x) for x in v),
                         "must be positive numbers",
                         "step-scale sweep for the discretization experiment"),
    "delta_values": _Key("floats", [1e-1, 1e-2, 1e-3],
                         lambda v: all(_finite_pos(x) for x in v),
                         "must be positive numbers",
                         "stopping-offset sweep for the uniformization cost curve"),
    "c_values": _Key("floats", [0.8, 1.0, 1.25],
                     lambda v: all(_finite_pos(x) for x in v),
                     "must be positive numbers",
                     "miscalibration sweep for the approximation experiment"),
    "b_values": _Key("ints", [1, 4, 16], lambda v: all(x >= 1 for x in v),
                     "must be positive integers",
                     "block-count sweep for the uniformization exactness check"),
}


def _coerce(key: str, raw, source: str | None = None):
    """Read one config value from JSON or flag text; errors name the key."""
    spec, label = KEYS[key], source or key
    if key == "M" and raw is None:
        return math.inf
    try:
        if isinstance(raw, bool):
            raise ValueError
        if spec.typ == "int":
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError
            v = int(raw)
        elif spec.typ == "float":
            v = float(raw)
        elif spec.typ == "str":
            if not isinstance(raw, str):
                raise ValueError
            v = raw
        else:
            if isinstance(raw, str):
                parts = [x.strip() for x in raw.split(",") if x.strip()]
            elif isinstance(raw, (list, tuple)):
                parts = list(raw)
            else:
                raise ValueError
            conv = float if spec.typ == "floats" else int
            v = [conv(x) for x in parts]
            if not v:
                raise ValueError
    except (TypeError, ValueError):
        raise OutOfRange(f"{label}: cannot read a {spec.typ} value from {raw!r}") from None
    return v


def _validate(key: str, value) -> None:
    if key == "model":
        if value in MODEL_NAMES:
            return
        if isinstance(value, str) and value.endswith(".json"):
            if not Path(value).is_file():
                raise MissingFile(f"model: file not found: {value}")
            return
        raise OutOfRange(
            f"model must be one of {list(MODEL_NAMES)} or a path to a .json "
            f"rate-matrix file, got {value!r}"
        )
    spec = KEYS[key]
    if not spec.check(value):
        raise OutOfRange(f"{key} {spec.msg}, got {value!r}")


def parse_config(config_path: str | None, flag_values: dict, env=None) -> dict:
    """Merge defaults, JDL_SEED, a JSON config file, and flags, then validate.

    flag_values maps key name to a raw string (or None when the flag was not
    given).  Unknown file keys raise UnknownKey with a spelling suggestion.
    """
    import os

    env = os.environ if env is None else env
    values = {k: spec.default for k, spec in KEYS.items()}
    if "JDL_SEED" in env:
        values["seed"] = _coerce("seed", env["JDL_SEED"], source="JDL_SEED")
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise MissingFile(f"config: file not found: {config_path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise OutOfRange(f"config: not valid JSON: {e}") from None
        if not isinstance(doc, dict):
            raise OutOfRange("config: top level must be a JSON object of flat keys")
        for k, raw in doc.items():
            if k not in KEYS:
                hint = difflib.get_close_matches(k, KEYS, n=1)
                extra = f" (did you mean {hint[0]!r}?)" if hint else ""
                raise UnknownKey(f"unknown config key {k!r}{extra}")
            values[k] = _coerce(k, raw)
    for k, raw in flag_values.items():
        if raw is not None:
            values[k] = _coerce(k, raw)
    for k in KEYS:
        _validate(k, values[k])
    if values["gamma"] > values["eta"]:
        raise OutOfRange(
            f"eta must be >= gamma, got eta={values['eta']!r} < gamma={values['gamma']!r}"
        )
    return values


# --- run configuration ----------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    command: str
    variant: str | None
    values: dict
    out: Path
    plot_data: bool

    def resolved_json(self) -> str:
        doc: dict = {"command": self.command, "variant": self.variant}
        for k in KEYS:
            v = self.values[k]
            doc[k] = None if isinstance(v, float) and math.isinf(v) else v
        return json.dumps(doc, indent=2) + "\n"


def _resolve_variant(command: str, variant: str | None, values: dict) -> str | None:
    if command == "sample":
        v = variant if variant is not None else values["algorithm"]
        if v not in ALGORITHMS:
            raise OutOfRange(f"algorithm must be one of {list(ALGORITHMS)}, got {v!r}")
        return v
    if command == "experiment":
        v = variant if variant is not None else values["experiment"]
        if not v:
            raise OutOfRange(
                "experiment: give a variant on the command line or set the "
                f"\"experiment\" key; choices are {list(EXPERIMENTS)}"
            )
        if v not in EXPERIMENTS:
            raise OutOfRange(f"experiment must be one of {list(EXPERIMENTS)}, got {v!r}")
        return v
    if variant is not None:
        raise OutOfRange(f"{command} takes no variant, got {variant!r}")
    return None


def build_model(values: dict) -> analysis.Model:
    name = values["model"]
    T, delta = values["T"], values["delta"]
    if name == "two-state":
        return analysis.two_state_model(T, delta)
    if name == "hypercube":
        return analysis.hypercube_model(values["d"], T, delta)
    if name == "grid":
        return analysis.grid_model(values["side"], values["d"], T, delta)
    if name == "asym-hypercube":
        return analysis.asymmetric_hypercube_model(values["d"], values["p"], T, delta)
    text = Path(name).read_text()
    space, q = rate_matrix_from_json(text)
    doc = json.loads(text)
    if "p0" in doc:
        raw = np.asarray(doc["p0"], dtype=np.float64)
        if raw.shape != (q.size,):
            raise OutOfRange(f"model: p0 must have {q.size} entries, got shape {raw.shape}")
        p0 = Distribution(raw)
    else:
        p0 = uniform(q.size)
    return analysis.Model(Path(name).stem, q, p0, T, delta, space)


# --- artifact helpers -----------------------------------------------------------


def _write(cfg: RunConfig, name: str, text: str, written: list) -> None:
    (cfg.out / name).write_text(text)
    written.append(name)
    print(f"wrote {cfg.out / name}")


def _histogram_csv(states: np.ndarray, n: int, exact: np.ndarray) -> str:
    counts = np.bincount(states, minlength=n)
    lines = ["state,count,frequency,exact_probability"]
    for x in range(n):
        freq = counts[x] / states.size
        lines.append(f"{x},{int(counts[x])},{float(freq)!r},{float(exact[x])!r}")
    return "\n".join(lines) + "\n"


def _histogram_dat(states: np.ndarray, n: int) -> str:
    counts = np.bincount(states, minlength=n)
    return "".join(f"{x} {float(counts[x] / states.size)!r}\n" for x in range(n))


def _write_report(cfg: RunConfig, rep, stem: str, written: list) -> None:
    # wall clock lives only in the manifest so report bytes are reproducible
    doc = json.loads(rep.to_json())
    doc.pop("wall_clock_seconds", None)
    _write(cfg, f"{stem}.json", json.dumps(doc, indent=2) + "\n", written)
    _write(cfg, f"{stem}.csv", rep.to_csv(), written)
    if cfg.plot_data:
        _write(cfg, f"{stem}.dat", rep.plot_data(), written)


def _mc_tolerance(n_states: int, n_paths: int) -> float:
    return 4.0 * math.sqrt(n_states / n_paths)


def _auto_clamp(rev, horizon: float, n_grid: int = 512) -> float:
    """Finite score bound from the exact marginals: max mass ratio plus 5%."""
    probs = rev.at_many(np.linspace(0.0, horizon, n_grid))
    return float((probs.max(axis=1) / probs.min(axis=1)).max()) * 1.05


# --- subcommands ----------------------------------------------------------------
#
# Each _setup_* validates and builds everything that can fail from a bad
# configuration (usage errors, exit 2) and returns a zero-argument closure
# that does the actual computation (scientific failures, exit 1) and
# returns a list of violated-invariant strings.


def _setup_simulate_forward(cfg: RunConfig, model: analysis.Model, written: list):
    v = cfg.values
    prop = build_propagator(model.q)
    p_end = propagate(prop, model.p0, model.total_time)

    def execute():
        rng = make_rng(v["seed"], 0)
        batch = prm.simulate_ctmc_forward_batch(
            model.q, model.p0, model.total_time, v["n_paths"], rng
        )
        term = batch.terminal_states()
        freq = np.bincount(term, minlength=model.n_states) / term.size
        tv = tv_distance(freq, p_end)
        tol = _mc_tolerance(model.n_states, v["n_paths"])
        _write(cfg, "paths.jsonl", prm.batch_to_jsonl(batch), written)
        _write(cfg, "terminal-histogram.csv",
               _histogram_csv(term, model.n_states, p_end.probs), written)
        if cfg.plot_data:
            _write(cfg, "terminal-histogram.dat",
                   _histogram_dat(term, model.n_states), written)
        diag = {
            "model": model.descriptor(),
            "n_paths": v["n_paths"],
            "mean_jumps": float(batch.jump_counts().mean()),
            "terminal_tv_to_exact": tv,
            "mc_tolerance": tol,
        }
        violations = []
        if tv > tol:
            violations.append(
                f"forward terminal TV {tv:.4g} exceeds Monte Carlo tolerance "
                f"{tol:.4g} (model {model.name}, T={model.total_time})"
            )
        diag["violations"] = violations
        _write(cfg, "diagnostics.json", json.dumps(diag, indent=2) + "\n", written)
        print(f"terminal TV to exact marginal: {tv:.6f} (tolerance {tol:.6f})")
        return violations

    return execute


def _setup_sample(cfg: RunConfig, model: analysis.Model, written: list):
    v = cfg.values
    algorithm = cfg.variant
    horizon = model.total_time - model.delta
    prop = build_propagator(model.q)
    rev = reversed_marginals(prop, model.p0, model.total_time)
    if algorithm == "uniformization":
        if horizon <= 0.0:
            raise EmptyGrid("delta >= T leaves an empty grid")
        grid = samplers.TimeGrid(
            np.linspace(0.0, horizon, v["blocks"] + 1),
            kind="uniform", delta=model.delta, total_time=model.total_time,
        )
    else:
        grid = samplers.build_time_grid(
            model.total_time, kappa=v["kappa"], delta=model.delta,
            gamma=v["gamma"], eta=v["eta"],
        )
    clamp = v["M"]
    clamp_source = "config M"
    if algorithm == "uniformization" and not math.isfinite(clamp):
        clamp = _auto_clamp(rev, horizon)
        clamp_source = "auto (max exact mass ratio + 5%)"
    policy = v["policy"]
    if policy == "auto":
        policy = "displacement" if model.space is not None else "uniform"
    p_start = propagate(prop, model.p0, model.total_time)
    p_stop = propagate(prop, model.p0, model.delta)

    def execute():
        rng = make_rng(v["seed"], 0)
        if v["score"] == "tabular":
            result = score.train_tabular_score(
                model.q, rev, grid, clamp=clamp, max_iters=v["train_iters"]
            )
            provider = result.provider
        else:
            provider = score.ExactScore(rev, clamp=clamp)
            if v["score"] == "perturbed":
                provider = score.ScaledScore(provider, v["c"])
        diag = {
            "model": model.descriptor(),
            "algorithm": algorithm,
            "score": v["score"],
            "n_paths": v["n_paths"],
            "n_steps": grid.n_steps,
            "clamp": None if not math.isfinite(clamp) else clamp,
            "clamp_source": clamp_source,
        }
        violations = []
        if algorithm == "uniformization":
            run = samplers.run_uniformization(
                model.q, provider, grid, rng, n_paths=v["n_paths"], initial=p_start
            )
            term = run.batch.terminal_states()
            diag["mean_events"] = run.mean_events
            diag["block_bound"] = float(run.bounds[0])
        else:
            run = samplers.run_tau_leaping(
                model.q, provider, grid, rng,
                n_paths=v["n_paths"], initial=p_start,
                space=model.space, policy=policy,
            )
            term = run.batch.terminal_states()
            diag["policy"] = policy
            diag["collision_fraction"] = run.collision_fraction
        freq = np.bincount(term, minlength=model.n_states) / term.size
        tv_stop = tv_distance(freq, p_stop)
        tol = _mc_tolerance(model.n_states, v["n_paths"])
        diag["terminal_tv_to_stopped_marginal"] = tv_stop
        diag["mc_tolerance"] = tol
        if algorithm == "uniformization":
            # exact in law: disagreement with p_delta beyond MC noise is a bug
            if tv_stop > tol:
                violations.append(
                    f"uniformization terminal TV {tv_stop:.4g} to the stopped "
                    f"marginal exceeds tolerance {tol:.4g} "
                    f"(B={v['blocks']}, score={v['score']})"
                )
        else:
            # biased in law; the invariant is agreement with the leap oracle
            diag["oracle_checked"] = False
            if model.n_states <= analysis.EXACT_LAW_LIMIT:
                try:
                    law = analysis.tau_leaping_exact_law(
                        model.q, provider, grid,
                        initial=p_start, space=model.space, policy=policy,
                    )
                except TooLarge as e:
                    diag["oracle_note"] = f"oracle skipped: {e}"
                else:
                    tv_oracle = tv_distance(freq, law)
                    diag["oracle_checked"] = True
                    diag["terminal_tv_to_oracle"] = tv_oracle
                    if tv_oracle > tol:
                        violations.append(
                            f"tau-leaping empirical law TV {tv_oracle:.4g} to its "
                            f"enumeration oracle exceeds tolerance {tol:.4g} "
                            f"(kappa={v['kappa']}, {grid.n_steps} steps)"
                        )
        _write(cfg, "terminal-histogram.csv",
               _histogram_csv(term, model.n_states, p_stop.probs), written)
        if cfg.plot_data:
            _write(cfg, "terminal-histogram.dat",
                   _histogram_dat(term, model.n_states), written)
        diag["violations"] = violations
        _write(cfg, "diagnostics.json", json.dumps(diag, indent=2) + "\n", written)
        print(f"terminal TV to stopped marginal: {tv_stop:.6f} (tolerance {tol:.6f})")
        return violations

    return execute


def _setup_spectral(cfg: RunConfig, model: analysis.Model, written: list):
    v = cfg.values
    symmetric = bool(np.allclose(model.q.entries, model.q.entries.T))

    def execute():
        if symmetric:
            rep = spectral.spectral_report(model.q, seed=v["seed"])
            doc = json.loads(rep.to_json())
            doc["symmetric"] = True
            print(rep.table())
        else:
            pi = stationary_distribution(model.q)
            gap = spectral.reversible_spectral_gap(model.q, pi.probs)
            mls = spectral.mls_constant_estimate(model.q, pi.probs, seed=v["seed"])
            doc = {
                "gap": gap,
                "mls_estimate": mls.rho_hat,
                "raw_ratio": mls.raw_ratio,
                "mixing_time_bound": spectral.mixing_time_bound(mls.rho_hat, model.n_states),
                "normalization_note": mls.normalization_note,
                "symmetric": False,
                "pi_min": float(pi.probs.min()),
            }
            print(f"spectral gap lambda_2      {gap:.10g}")
            print(f"mls estimate rho_hat       {mls.rho_hat:.10g}")
            print(f"mixing time bound          {doc['mixing_time_bound']:.10g}")
        violations = []
        if doc["mls_estimate"] > doc["gap"] + 1e-6:
            violations.append(
                f"log-Sobolev estimate {doc['mls_estimate']:.6g} exceeds the "
                f"spectral gap {doc['gap']:.6g} + 1e-6 (model {model.name})"
            )
        doc["model"] = model.descriptor()
        doc["violations"] = violations
        _write(cfg, "spectral.json", json.dumps(doc, indent=2) + "\n", written)
        order = [k for k in doc if k not in ("model", "violations", "normalization_note")]
        csv = "quantity,value\n" + "".join(f"{k},{doc[k]!r}\n" for k in order)
        _write(cfg, "spectral.csv", csv, written)
        return violations

    return execute


def _setup_train_score(cfg: RunConfig, model: analysis.Model, written: list):
    v = cfg.values
    prop = build_propagator(model.q)
    rev = reversed_marginals(prop, model.p0, model.total_time)
    grid = samplers.build_time_grid(
        model.total_time, kappa=v["kappa"], delta=model.delta,
        gamma=v["gamma"], eta=v["eta"],
    )

    def execute():
        result = score.train_tabular_score(
            model.q, rev, grid, clamp=v["M"], max_iters=v["train_iters"]
        )
        _write(cfg, "trained-score.json",
               score.tabular_to_json(result.provider, model.q) + "\n", written)
        _write(cfg, "loss-trace.csv", score.trace_to_csv(result.trace), written)
        if cfg.plot_data:
            dat = "".join(f"{int(it)} {float(val)!r}\n" for it, val in result.trace)
            _write(cfg, "loss-trace.dat", dat, written)
        info = {
            "model": model.descriptor(),
            "grid_points": grid.points.size,
            "iterations": result.iterations,
            "final_excess_loss": float(np.sum(result.excess)),
            "max_block_excess": float(np.max(result.excess)),
            "clamp": None if not math.isfinite(v["M"]) else v["M"],
        }
        if model.n_states <= 256:
            info["max_rel_error_vs_exact"] = _trained_vs_exact(
                model, rev, grid, result.provider
            )
            print(f"max relative error vs exact score: "
                  f"{info['max_rel_error_vs_exact']:.3e}")
        _write(cfg, "training.json", json.dumps(info, indent=2) + "\n", written)
        print(f"trained {grid.n_steps} blocks in {result.iterations} iterations, "
              f"excess loss {info['final_excess_loss']:.3e}")
        return []

    return execute


def _trained_vs_exact(model, rev, grid, provider) -> float:
    """Worst relative mass-ratio error on graph edges, at block left endpoints."""
    exact = score.ExactScore(rev, clamp=provider.clamp)
    s = grid.points[:-1]
    into = off_diagonal(model.q)
    worst = 0.0
    for x in range(model.n_states):
        states = np.full(s.size, x, dtype=np.int64)
        got = provider.rows(s, states)
        want = exact.rows(s, states)
        mask = into[:, x] > 0.0
        if mask.any():
            rel = np.abs(got[:, mask] - want[:, mask]) / want[:, mask]
            worst = max(worst, float(rel.max()))
    return worst


def _setup_experiment(cfg: RunConfig, model: analysis.Model, written: list):
    v = cfg.values
    kind = cfg.variant
    if kind == "truncation" and not np.allclose(model.q.entries, model.q.entries.T):
        raise OutOfRange(
            "model: the truncation experiment needs a symmetric generator, "
            f"got {model.name!r}"
        )

    def execute():
        extra_violations: list[str] = []
        if kind == "truncation":
            rep = analysis.truncation_error_curve(
                model.q, model.p0, v["t_values"], mls_kwargs={"seed": v["seed"]}
            )
        elif kind == "discretization":
            n_mc = 0 if model.n_states <= analysis.EXACT_LAW_LIMIT else v["n_paths"]
            rep = analysis.discretization_sweep(
                model, v["kappa_values"], n_paths=n_mc,
                policy=None if v["policy"] == "auto" else v["policy"],
                clamp=v["M"], seed=v["seed"], gamma=v["gamma"], eta=v["eta"],
            )
        elif kind == "uniformization-exactness":
            rep = analysis.uniformization_exactness(
                model, v["b_values"], n_paths=v["n_paths"], seed=v["seed"]
            )
            cost = analysis.uniformization_cost(
                model, v["delta_values"],
                n_paths=min(v["n_paths"], 20_000), seed=v["seed"],
            )
            _write_report(cfg, cost, "cost", written)
            extra_violations = list(cost.violations)
        elif kind == "approximation":
            rep = analysis.approximation_error_experiment(
                model, v["c_values"], n_paths=v["n_paths"],
                blocks=v["blocks"], seed=v["seed"],
            )
        else:
            rep = analysis.girsanov_identity_check(
                model, n_paths=v["n_paths"], c=v["c"], seed=v["seed"]
            )
        _write_report(cfg, rep, "report", written)
        for key, val in sorted(rep.slopes.items()):
            print(f"{key}: {val:.6g}")
        return list(rep.violations) + extra_violations

    return execute


_SETUP = {
    "simulate-forward": _setup_simulate_forward,
    "sample": _setup_sample,
    "spectral": _setup_spectral,
    "train-score": _setup_train_score,
    "experiment": _setup_experiment,
}


# --- entry point ----------------------------------------------------------------


def _files_help() -> str:
    keys = "\n".join(
        f"  {k.replace('_', '-'):<14} {spec.typ:<7} default {_default_text(spec)}"
        f"  {spec.help}"
        for k, spec in KEYS.items()
    )
    return (
        "output files (fixed names, all under --out):\n"
        "  always            resolved-config.json, manifest.json\n"
        "  simulate-forward  paths.jsonl, terminal-histogram.csv, diagnostics.json\n"
        "  sample            terminal-histogram.csv, diagnostics.json\n"
        "  spectral          spectral.json, spectral.csv\n"
        "  train-score       trained-score.json, loss-trace.csv, training.json\n"
        "  experiment        report.json, report.csv; uniformization-exactness\n"
        "                    also writes cost.json, cost.csv\n"
        "  --plot-data       adds gnuplot-ready two-column .dat twins\n\n"
        "config keys (flat JSON file via --config, or the same names as flags):\n"
        f"{keys}\n\n"
        "precedence: flags > config file > JDL_SEED (seed only) > defaults\n"
        "exit codes: 0 success; 1 scientific assertion failed; 2 usage error\n"
    )


def _default_text(spec: _Key) -> str:
    if isinstance(spec.default, float) and math.isinf(spec.default):
        return "inf"
    if spec.default == "":
        return "(unset)"
    if isinstance(spec.default, list):
        return ",".join(str(x) for x in spec.default)
    return str(spec.default)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jdl",
        description="Discrete diffusion models: forward chains, exact scores, "
                    "backward samplers, spectral diagnostics, error-decomposition "
                    "experiments.",
        epilog=_files_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("variant", nargs="?", default=None,
                        help="sample: tau-leaping|uniformization; "
                             "experiment: " + "|".join(EXPERIMENTS))
    parser.add_argument("--config", metavar="FILE", help="JSON file of flat config keys")
    parser.add_argument("--out", default="jdl-out", metavar="DIR",
                        help="output directory (default: jdl-out)")
    parser.add_argument("--plot-data", action="store_true",
                        help="also emit gnuplot-ready .dat files")
    for key, spec in KEYS.items():
        parser.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None,
                            metavar=spec.typ.upper(), help=spec.help)
    return parser


@contextlib.contextmanager
def _thread_cap(n: int):
    if n > 0:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=n):
            yield
    else:
        yield


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    t0 = time.monotonic()
    try:
        flag_values = {k: getattr(args, k) for k in KEYS}
        values = parse_config(args.config, flag_values)
        variant = _resolve_variant(args.command, args.variant, values)
        model = build_model(values)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        cfg = RunConfig(args.command, variant, values, out, args.plot_data)
        resolved = cfg.resolved_json()
        (out / "resolved-config.json").write_text(resolved)
        written = ["resolved-config.json"]
        execute = _SETUP[args.command](cfg, model, written)
    except Error as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    code = 0
    try:
        with _thread_cap(values["threads"]):
            violations = execute()
    except (Error, AssertionError) as e:
        print(f"scientific failure: {type(e).__name__}: {e}", file=sys.stderr)
        violations, code = [f"{type(e).__name__}: {e}"], 1
    else:
        if violations:
            for item in violations:
                print(f"violated: {item}", file=sys.stderr)
            code = 1
    manifest = {
        "command": cfg.command,
        "variant": cfg.variant,
        "config_sha256": hashlib.sha256(resolved.encode()).hexdigest(),
        "seed": values["seed"],
        "model": model.descriptor(),
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "jdl": __version__,
        },
        "wall_clock_seconds": round(time.monotonic() - t0, 6),
        "artifacts": written + ["manifest.json"],
        "exit_code": code,
        "violations": violations,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return code


if __name__ == "__main__":
    raise SystemExit(main())
