"""Error-decomposition experiments.

Hand oracles used below:
  * 2-state symmetric chain from (1, 0): p_t(0) = 1/2 + e^{-2t}/2, so the
    KL-to-uniform curve is available in closed form;
  * one tau-leap with a single Poisson clock of mass m: P(move) = 1 - e^{-m};
  * one tau-leap from a hypercube corner with clock masses m1, m2 under the
    displacement policy: P(stay) = e^{-m1-m2}, P(neighbour i) =
    (1-e^{-mi}) e^{-mj}, P(far corner) = (1-e^{-m1})(1-e^{-m2});
    under the uniform policy the far corner is unreachable and the
    both-fired mass splits evenly between the neighbours;
  * the horizon floor: uniform run through diag(p_delta) K^T diag(1/p_T),
    recomputed here with scipy.linalg.expm instead of the propagator.
"""

import json
import math

import numpy as np
import pytest
import scipy.linalg

from jdl import analysis, exact, prm, samplers, score, statespace as ss
from jdl.errors import OutOfRange, TooLarge
from jdl.rng import make_rng


def two_state():
    return ss.validate_rate_matrix(np.array([[-1.0, 1.0], [1.0, -1.0]]))


class ConstRows:
    """Provider returning a fixed ratio row regardless of time or state."""

    def __init__(self, row):
        self.row = np.asarray(row, dtype=np.float64)
        self.clamp = float(self.row.max())

    def rows(self, s, states):
        return np.broadcast_to(self.row, (s.size, self.row.size)).copy()


# === models and report plumbing ==============================================


class TestModels:
    def test_suite_contents(self):
        suite = analysis.model_suite()
        names = [m.name for m in suite]
        assert names == [
            "two-state",
            "hypercube-d2",
            "hypercube-d3",
            "grid-3x2",
            "asym-hypercube-d2-p0.3",
        ]
        for m in suite:
            assert m.q.entries.shape == (m.n_states, m.n_states)
            assert m.p0.probs.size == m.n_states
            assert 0.0 < m.delta < m.total_time
            json.dumps(m.descriptor())  # descriptor must be serializable

    def test_spaces_present_where_expected(self):
        suite = analysis.model_suite()
        assert suite[0].space is None
        assert all(m.space is not None for m in suite[1:])


class TestReportPlumbing:
    def make_report(self):
        pts = [
            analysis.SweepPoint(param=0.1, estimate=1.5),
            analysis.SweepPoint(param=0.2, estimate=2.5, se=0.1, lo=2.3, hi=2.7),
        ]
        return analysis.ExperimentReport(
            kind="demo", model={"n_states": 2}, sweep_name="x", points=pts,
            slopes={"a": 1.0}, seed=7,
        )

    def test_exact_points_have_degenerate_intervals(self):
        rep = self.make_report()
        assert rep.points[0].exact and not rep.points[1].exact
        assert rep.points[0].interval() == (1.5, 1.5)
        assert rep.points[1].interval() == (2.3, 2.7)

    def test_csv_leaves_se_empty_for_exact_points(self):
        lines = self.make_report().to_csv().splitlines()
        assert lines[0] == "param,estimate,se,lo,hi"
        assert lines[1] == "0.1,1.5,,1.5,1.5"
        assert lines[2] == "0.2,2.5,0.1,2.3,2.7"

    def test_json_round_trips(self):
        doc = json.loads(self.make_report().to_json())
        assert doc["kind"] == "demo"
        assert doc["points"][0]["exact"] is True
        assert "se" not in doc["points"][0]
        assert doc["points"][1]["se"] == 0.1
        assert doc["seed"] == 7 and doc["violations"] == []

    def test_plot_data_is_two_columns(self):
        rows = self.make_report().plot_data().strip().splitlines()
        assert rows == ["0.1 1.5", "0.2 2.5"]

    def test_fit_line_recovers_exact_line(self):
        x = np.array([0.0, 1.0, 2.0, 3.0])
        slope, intercept, r2 = analysis._fit_line(x, 2.0 * x - 1.0)
        assert slope == pytest.approx(2.0, abs=1e-12)
        assert intercept == pytest.approx(-1.0, abs=1e-12)
        assert r2 == pytest.approx(1.0, abs=1e-12)


# === truncation ===============================================================


class TestTruncationCurve:
    def closed_form_kl(self, t):
        p = 0.5 + 0.5 * math.exp(-2.0 * t)
        return p * math.log(2 * p) + (1 - p) * math.log(2 * (1 - p))

    def test_two_state_matches_closed_form(self):
        q = two_state()
        ts = [0.25, 0.5, 1.0, 2.0, 3.0]
        rep = analysis.truncation_error_curve(
            q, exact.Distribution(np.array([1.0, 0.0])), ts
        )
        for p, t in zip(rep.points, ts):
            assert p.exact
            assert p.estimate == pytest.approx(self.closed_form_kl(t), abs=1e-12)
        assert rep.slopes["lambda_2"] == pytest.approx(2.0, abs=1e-9)
        # KL ~ e^{-4t}/2 for large t, so the fitted decay rate is ~ 2*gap
        assert rep.slopes["r_hat"] == pytest.approx(4.0, rel=0.02)
        assert rep.slopes["rho_hat"] <= rep.slopes["lambda_2"] + 1e-6

    def test_uniform_start_gives_zero_curve(self):
        q = two_state()
        rep = analysis.truncation_error_curve(
            q, exact.uniform(2), [0.5, 1.0, 2.0], compute_rho=False
        )
        assert all(p.estimate == 0.0 for p in rep.points)
        assert "r_hat" not in rep.slopes
        assert rep.notes  # the skipped fit is called out

    def test_hypercube_tail_is_log_linear(self):
        _, q = ss.hypercube_rate_matrix(3)
        rep = analysis.truncation_error_curve(
            q, exact.point_mass(0, 8), np.linspace(1.0, 4.0, 7),
            compute_rho=False,
        )
        assert rep.slopes["tail_fit_r2"] >= 0.999


class TestTruncationFloors:
    def test_floor_matches_expm_reconstruction(self):
        m = analysis.two_state_model(total_time=1.0, delta=0.1)
        floors = analysis.truncation_floors(m)

        k = scipy.linalg.expm(0.9 * m.q.entries)  # kernel from delta to T
        p_hi = scipy.linalg.expm(1.0 * m.q.entries) @ m.p0.probs
        p_lo = scipy.linalg.expm(0.1 * m.q.entries) @ m.p0.probs
        terminal = (p_lo[:, None] * k.T / p_hi[None, :]) @ np.full(2, 0.5)
        want = float(
            (p_lo * (np.log(p_lo) - np.log(terminal))).sum()
        )
        assert floors["exact_backward"] == pytest.approx(want, rel=1e-10)

        p_end = scipy.linalg.expm(1.0 * m.q.entries) @ m.p0.probs
        want_fwd = float((p_end * (np.log(p_end) - np.log(0.5))).sum())
        assert floors["forward_kl"] == pytest.approx(want_fwd, rel=1e-10)

    def test_asymmetric_model_uses_its_stationary_law(self):
        m = analysis.asymmetric_hypercube_model(2, 0.3)
        floors = analysis.truncation_floors(m)
        # p0 = point mass at the high-probability corner of pi = prod(0.7, 0.3)
        pi = exact.stationary_distribution(m.q).probs
        p_end = scipy.linalg.expm(m.total_time * m.q.entries) @ m.p0.probs
        want = float((p_end * (np.log(p_end) - np.log(pi))).sum())
        assert floors["forward_kl"] == pytest.approx(want, rel=1e-8)


# === empirical KL =============================================================


class TestEmpiricalKL:
    def test_exact_sampler_estimate_is_tiny(self):
        ref = exact.Distribution(np.array([0.4, 0.3, 0.2, 0.1]))
        rng = make_rng(0, 9)
        u = rng.random(1_000_000)
        samples = (np.cumsum(ref.probs)[None, :] <= u[:, None]).sum(axis=1)
        est = analysis.empirical_terminal_kl(samples, ref, rng=make_rng(0, 10))
        assert 0.0 <= est.estimate <= 0.002
        assert est.lo <= est.hi
        assert not est.flagged_missing_support

    def test_degenerate_histogram_closed_form(self):
        # all mass on state 0: smoothed qhat is known exactly
        n, k, sm = 1000, 4, 0.5
        ref = exact.uniform(k)
        est = analysis.empirical_terminal_kl(
            np.zeros(n, dtype=np.int64), ref, rng=make_rng(1, 2)
        )
        qhat = np.full(k, sm / (n + sm * k))
        qhat[0] = (n + sm) / (n + sm * k)
        want = float((ref.probs * (np.log(ref.probs) - np.log(qhat))).sum())
        assert est.estimate == pytest.approx(want, rel=1e-12)
        # far above log|X|: the reference-first direction punishes missing states
        assert est.estimate > math.log(k)
        assert est.flagged_missing_support

    def test_small_sample_warns(self):
        ref = exact.uniform(4)
        with pytest.warns(UserWarning, match="samples"):
            analysis.empirical_terminal_kl(
                np.array([0, 1, 2, 3]), ref, rng=make_rng(2, 2)
            )

    def test_smoothing_must_be_positive(self):
        with pytest.raises(OutOfRange):
            analysis.empirical_terminal_kl(
                np.zeros(1000, dtype=np.int64), exact.uniform(2), smoothing=0.0
            )


# === tau-leaping oracle law ===================================================


class TestTauLeapExactLaw:
    def test_zero_rates_leave_initial_law(self):
        q = ss.validate_rate_matrix(np.zeros((3, 3)))
        grid = samplers.TimeGrid(np.array([0.0, 0.5, 1.0]))
        law = analysis.tau_leaping_exact_law(
            q, ConstRows([1.0, 1.0, 1.0]), grid,
            initial=exact.Distribution(np.array([0.2, 0.3, 0.5])),
            policy="uniform",
        )
        np.testing.assert_allclose(law.probs, [0.2, 0.3, 0.5], atol=1e-15)

    def test_two_state_single_step_closed_form(self):
        q = two_state()
        m = 0.1  # ratio 1, rate 1, step 0.1
        grid = samplers.TimeGrid(np.array([0.0, m]))
        law = analysis.tau_leaping_exact_law(
            q, ConstRows([1.0, 1.0]), grid, initial=exact.point_mass(0, 2),
            policy="uniform",
        )
        assert law.probs[1] == pytest.approx(1.0 - math.exp(-m), abs=1e-12)

    def test_corner_two_clock_laws_both_policies(self):
        space, q = ss.hypercube_rate_matrix(2)
        a, b, dt = 1.3, 0.6, 0.5
        m1, m2 = a * dt, b * dt
        # rows order (00, 01, 10, 11); clocks from 00 target 01 and 10
        provider = ConstRows([1.0, a, b, 1.0])
        grid = samplers.TimeGrid(np.array([0.0, dt]))

        disp = analysis.tau_leaping_exact_law(
            q, provider, grid, initial=exact.point_mass(0, 4), space=space,
            policy="displacement",
        )
        e1, e2 = math.exp(-m1), math.exp(-m2)
        np.testing.assert_allclose(
            disp.probs,
            [e1 * e2, (1 - e1) * e2, e1 * (1 - e2), (1 - e1) * (1 - e2)],
            atol=1e-12,
        )

        unif = analysis.tau_leaping_exact_law(
            q, provider, grid, initial=exact.point_mass(0, 4), space=space,
            policy="uniform",
        )
        both = (1 - e1) * (1 - e2)
        np.testing.assert_allclose(
            unif.probs,
            [e1 * e2, (1 - e1) * e2 + both / 2, e1 * (1 - e2) + both / 2, 0.0],
            atol=1e-12,
        )

    def test_collision_mass_matches_poisson_tail(self):
        space, q = ss.hypercube_rate_matrix(2)
        a, dt = 0.8, 0.5
        provider = ConstRows([1.0, a, a, 1.0])
        grid = samplers.TimeGrid(np.array([0.0, dt]))
        _, info = analysis._tau_leap_dp(
            q, provider, grid, initial=exact.point_mass(0, 4), space=space,
            policy="displacement", poisson_tail_tol=1e-12,
        )
        lam = 2 * a * dt
        want = 1.0 - math.exp(-lam) * (1.0 + lam)
        assert info["collision_steps_per_path"] == pytest.approx(want, abs=1e-10)
        assert info["min_column_mass"] >= 1.0 - 1e-11

    def test_oracle_matches_sampler_histogram(self):
        # hypercube d=2, 4 uniform steps, exact score, displacement policy
        m = analysis.hypercube_model(2, total_time=2.0, delta=0.05)
        prop = exact.build_propagator(m.q)
        rev = exact.reversed_marginals(prop, m.p0, m.total_time)
        provider = score.ExactScore(rev, clamp=analysis._score_clamp(rev, 1.95))
        grid = samplers.TimeGrid(np.linspace(0.0, 1.95, 5))
        law = analysis.tau_leaping_exact_law(
            q=m.q, provider=provider, grid=grid, space=m.space,
        )
        run = samplers.run_tau_leaping(
            m.q, provider, grid, make_rng(17, 0), n_paths=1_000_000,
            space=m.space,
        )
        emp = np.bincount(run.batch.terminal_states(), minlength=4) / 1_000_000
        assert exact.tv_distance(emp, law) <= 0.005

    def test_too_many_states_rejected(self):
        space, q = ss.hypercube_rate_matrix(7)
        grid = samplers.TimeGrid(np.array([0.0, 0.1]))
        with pytest.raises(TooLarge):
            analysis.tau_leaping_exact_law(
                q, ConstRows(np.ones(128)), grid, space=space
            )

    def test_runaway_mass_rejected(self):
        q = two_state()
        grid = samplers.TimeGrid(np.array([0.0, 1.0]))
        with pytest.raises(TooLarge):
            analysis.tau_leaping_exact_law(
                q, ConstRows([1.0, 1e4]), grid, policy="uniform"
            )

    def test_unknown_policy_rejected(self):
        q = two_state()
        grid = samplers.TimeGrid(np.array([0.0, 0.1]))
        with pytest.raises(OutOfRange):
            analysis.tau_leaping_exact_law(
                q, ConstRows([1.0, 1.0]), grid, policy="leftmost"
            )


# === discretization sweep =====================================================


class TestDiscretizationSweep:
    def test_two_state_oracle_sweep(self):
        m = analysis.two_state_model()
        rep = analysis.discretization_sweep(m, [0.4, 0.2, 0.1, 0.05], seed=3)
        excess = [p.extras["excess_over_floor"] for p in rep.points]
        assert all(p.exact for p in rep.points)
        assert all(e > 0 for e in excess)
        assert all(a > b for a, b in zip(excess, excess[1:]))
        assert 0.5 <= rep.slopes["loglog_slope"] <= 1.5
        assert rep.violations == []
        assert any("oracle" in n for n in rep.notes)
        colls = [p.extras["collision_fraction"] for p in rep.points]
        assert all(a > b for a, b in zip(colls, colls[1:]))

    def test_uniform_and_shrinking_grids_both_converge(self):
        # well-posed p0 (bounded away from zero) allows delta = 0
        q = two_state()
        m = analysis.Model(
            "two-state-soft", q,
            exact.Distribution(np.array([0.75, 0.25])), 1.5, 0.0,
        )
        uni = analysis.discretization_sweep(m, [0.1], grid_kind="uniform", seed=1)
        shr = analysis.discretization_sweep(
            m, [0.1], grid_kind="clamped", gamma=0.0, eta=0.5, seed=1
        )
        assert np.isfinite(uni.points[0].estimate)
        assert np.isfinite(shr.points[0].estimate)
        assert uni.points[0].estimate < 0.05
        assert shr.points[0].estimate < 0.05

    def test_unknown_grid_kind_rejected(self):
        m = analysis.two_state_model()
        with pytest.raises(OutOfRange):
            analysis.discretization_sweep(m, [0.1], grid_kind="chebyshev")

    def test_monte_carlo_path_carries_cis(self):
        m = analysis.two_state_model()
        rep = analysis.discretization_sweep(m, [0.2], n_paths=5000, seed=5)
        p = rep.points[0]
        assert not p.exact
        assert p.lo <= p.estimate <= p.hi or p.se > 0


# === uniformization ===========================================================


class TestUniformizationExperiments:
    def test_exactness_two_state(self):
        m = analysis.two_state_model()
        rep = analysis.uniformization_exactness(m, [1, 4], n_paths=20_000, seed=3)
        assert rep.violations == []
        assert all(p.estimate <= rep.slopes["mc_tolerance"] for p in rep.points)
        assert rep.slopes["reference_sampler_tv"] <= rep.slopes["mc_tolerance"]
        # same global bound regardless of block count: equal expected events
        means = [p.extras["mean_events"] for p in rep.points]
        assert means[0] == pytest.approx(means[1], rel=0.05)

    def test_cost_grows_logarithmically(self):
        m = analysis.two_state_model()
        rep = analysis.uniformization_cost(
            m, [1e-1, 1e-2, 1e-3], n_paths=3000, seed=5
        )
        assert rep.violations == []
        assert rep.slopes["slope_vs_log_inv_delta"] > 0.0
        assert rep.slopes["fit_r2"] >= 0.95
        means = [p.estimate for p in rep.points]
        assert means[0] < means[1] < means[2]
        # logarithmic, not linear: 10x smaller delta adds a roughly constant
        # increment instead of multiplying the count
        assert means[2] - means[1] < 3.0 * (means[1] - means[0])

    def test_geometric_blocks_end_at_horizon(self):
        g = analysis._geometric_blocks(2.0, 0.05)
        assert g.points[0] == 0.0 and g.points[-1] == pytest.approx(1.95)
        assert np.all(np.diff(g.points) > 0)
        late = g.points[g.points > 1.0]
        # distances to T shrink geometrically in the late region
        dists = 2.0 - late[:-1]
        assert np.all(np.abs(np.diff(np.log(dists)) + math.log(2)) < 1e-9)


# === approximation error ======================================================


class TestApproximationExperiment:
    def test_two_state_bound_and_k_shape(self):
        m = analysis.two_state_model()
        rep = analysis.approximation_error_experiment(
            m, [0.8, 1.0, 1.25], n_paths=20_000, seed=7
        )
        assert rep.violations == []
        by_c = {p.param: p for p in rep.points}
        assert by_c[1.0].extras["epsilon_hat"] == 0.0  # exactly, K(1) = 0
        # same path batch for every c: eps / K(c) is the same integral
        r08 = by_c[0.8].extras["epsilon_per_K"]
        r125 = by_c[1.25].extras["epsilon_per_K"]
        assert r08 == pytest.approx(r125, rel=1e-9)
        # three-point convexity of eps-hat in c
        mid = (by_c[0.8].extras["epsilon_hat"] + by_c[1.25].extras["epsilon_hat"]) / 2
        assert mid > by_c[1.0].extras["epsilon_hat"]


# === change-of-measure identities =============================================


class TestGirsanovCheck:
    def test_two_state_identities(self):
        m = analysis.two_state_model()
        rep = analysis.girsanov_identity_check(m, n_paths=20_000, seed=11)
        assert rep.violations == []
        # h = 1 (tilt 0): Z is identically 1, so the z-score is exactly 0
        assert rep.points[0].estimate == 0.0
        assert rep.points[0].extras["mean_Z"] == 1.0
        for p in rep.points:
            assert abs(p.estimate) <= 3.0
            assert abs(p.extras["z_reweighting"]) <= 3.0
        assert abs(rep.slopes["z_path_entropy_identity"]) <= 3.0


# === determinism ==============================================================


class TestReportDeterminism:
    def strip_clock(self, text):
        doc = json.loads(text)
        doc.pop("wall_clock_seconds")
        return doc

    def test_monte_carlo_experiment_reruns_identically(self):
        m = analysis.two_state_model()
        a = analysis.uniformization_exactness(m, [2], n_paths=4000, seed=21)
        b = analysis.uniformization_exactness(m, [2], n_paths=4000, seed=21)
        assert a.to_csv() == b.to_csv()
        assert self.strip_clock(a.to_json()) == self.strip_clock(b.to_json())

    def test_seed_changes_the_estimates(self):
        m = analysis.two_state_model()
        a = analysis.uniformization_exactness(m, [2], n_paths=4000, seed=21)
        c = analysis.uniformization_exactness(m, [2], n_paths=4000, seed=22)
        assert a.to_csv() != c.to_csv()
