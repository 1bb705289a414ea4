"""Score providers, the denoising loss, training, mismatch estimators.

Oracles:
  * two-state loss at s_hat = 1: loss = p(0) + p(1) = 1 and
    excess = p(1) K(p0/p1) + p(0) K(p1/p0) with K(r) = r - 1 - log r;
  * the pointwise optimum log(p(y)/p(x)) has zero excess;
  * gradient checked against central finite differences;
  * a provider scaled by c has mismatch exactly K(c) times the integrated
    reverse intensity, path by path.
"""

import numpy as np
import pytest

from jdl import exact, prm, samplers, score, statespace as ss
from jdl.errors import Diverged, NonPositiveScore, OutOfRange
from jdl.rng import make_rng


def two_state():
    return ss.validate_rate_matrix(np.array([[-1.0, 1.0], [1.0, -1.0]]))


def backward_setup(p0, horizon, q=None):
    q = two_state() if q is None else q
    prop = exact.build_propagator(q)
    rev = exact.reversed_marginals(prop, exact.Distribution(np.asarray(p0)), horizon)
    return q, prop, rev


def K(r):
    return r - 1.0 - np.log(r)


# === the loss ================================================================


class TestScoreEntropyLoss:
    def test_two_state_closed_form_at_unit_score(self):
        q = two_state()
        p = np.array([0.7, 0.3])
        loss, offset, excess = score.score_entropy_loss(q, p, np.zeros((2, 2)))
        assert loss == pytest.approx(1.0, abs=1e-14)
        want_excess = p[1] * K(p[0] / p[1]) + p[0] * K(p[1] / p[0])
        assert excess == pytest.approx(want_excess, rel=1e-12)
        assert offset == pytest.approx(loss - want_excess, rel=1e-12)

    def test_optimum_has_zero_excess(self):
        space, q = ss.hypercube_rate_matrix(2)
        p = np.array([0.4, 0.3, 0.2, 0.1])
        theta = np.log(p[None, :] / p[:, None])
        loss, offset, excess = score.score_entropy_loss(q, p, theta)
        assert abs(excess) < 1e-13
        assert loss == pytest.approx(offset, rel=1e-13)

    def test_excess_nonnegative_everywhere(self):
        q = two_state()
        rng = make_rng(0)
        for _ in range(50):
            p = rng.random(2) + 0.05
            p /= p.sum()
            theta = rng.normal(size=(2, 2))
            _, _, excess = score.score_entropy_loss(q, p, theta)
            assert excess >= -1e-12

    def test_gradient_matches_finite_differences(self):
        space, q = ss.hypercube_rate_matrix(2)
        rng = make_rng(1)
        p = rng.random(4) + 0.1
        p /= p.sum()
        theta = rng.normal(scale=0.5, size=(4, 4))
        grad = score.loss_gradient(q, p, theta)
        h = 1e-6
        for x in range(4):
            for y in range(4):
                if x == y:
                    continue
                tp, tm = theta.copy(), theta.copy()
                tp[x, y] += h
                tm[x, y] -= h
                fd = (
                    score.score_entropy_loss(q, p, tp)[0]
                    - score.score_entropy_loss(q, p, tm)[0]
                ) / (2 * h)
                assert abs(grad[x, y] - fd) < 1e-5

    def test_rejects_zero_mass(self):
        q = two_state()
        with pytest.raises(NonPositiveScore):
            score.score_entropy_loss(q, np.array([1.0, 0.0]), np.zeros((2, 2)))


# === providers ================================================================


class TestProviders:
    def test_exact_score_matches_marginal_ratios(self):
        q, prop, rev = backward_setup((0.8, 0.2), 1.0)
        provider = score.ExactScore(rev)
        s = np.array([0.0, 0.3, 1.0])
        rows = provider.rows(s, np.zeros(3, dtype=np.int64))
        probs = rev.at_many(s)
        assert np.allclose(rows, probs / probs[:, [0]], rtol=1e-12)

    def test_exact_score_clamp(self):
        q, prop, rev = backward_setup((0.99, 0.01), 1.0)
        provider = score.ExactScore(rev, clamp=2.0)
        rows = provider.rows(np.array([1.0]), np.array([1]))
        assert rows.max() <= 2.0
        with pytest.raises(NonPositiveScore):
            score.ExactScore(rev, clamp=0.0)

    def test_scaled_score(self):
        q, prop, rev = backward_setup((0.8, 0.2), 1.0)
        base = score.ExactScore(rev, clamp=5.0)
        scaled = score.ScaledScore(base, 1.3)
        s = np.array([0.2, 0.7])
        x = np.array([0, 1])
        assert np.allclose(scaled.rows(s, x), 1.3 * base.rows(s, x))
        assert scaled.clamp == pytest.approx(6.5)
        with pytest.raises(NonPositiveScore):
            score.ScaledScore(base, 0.0)

    def test_tabular_block_lookup(self):
        theta = np.zeros((2, 2, 2))
        theta[0, 0, 1] = 1.0
        theta[1, 0, 1] = 2.0
        tab = score.TabularScore(np.array([0.0, 0.5, 1.0]), theta)
        s = np.array([0.0, 0.49, 0.5, 1.0, 1.2])
        assert tab.block_of(s).tolist() == [0, 0, 1, 1, 1]
        rows = tab.rows(s, np.zeros(5, dtype=np.int64))
        assert np.allclose(rows[:, 1], np.exp([1.0, 1.0, 2.0, 2.0, 2.0]))

    def test_tabular_clamp_and_validation(self):
        theta = np.full((1, 2, 2), 3.0)
        tab = score.TabularScore(np.array([0.0, 1.0]), theta, clamp=4.0)
        assert tab.rows(np.array([0.5]), np.array([0])).max() == 4.0
        with pytest.raises(OutOfRange):
            score.TabularScore(np.array([0.0, 1.0]), np.zeros((2, 2, 2)))
        with pytest.raises(NonPositiveScore):
            score.TabularScore(np.array([0.0, 1.0]), np.zeros((1, 2, 2)), clamp=-1.0)


# === training =================================================================


class TestTraining:
    def test_two_state_converges_to_exact_ratios(self):
        q, prop, rev = backward_setup((0.8, 0.2), 1.0)
        grid = samplers.build_time_grid(1.0, kappa=0.25)
        result = score.train_tabular_score(q, rev, grid, tol=1e-12)
        assert result.excess.max() < 1e-10
        truth = score.ExactScore(rev)
        for k in range(grid.n_steps):
            s = np.full(2, grid.points[k])
            states = np.arange(2)
            got = result.provider.rows(s, states)
            want = truth.rows(s, states)
            assert np.allclose(got, want, rtol=1e-4)

    def test_hypercube_training(self):
        space, q = ss.hypercube_rate_matrix(2)
        p0 = exact.Distribution(np.array([0.55, 0.25, 0.12, 0.08]))
        prop = exact.build_propagator(q)
        rev = exact.reversed_marginals(prop, p0, 1.0)
        grid = samplers.build_time_grid(1.0, kappa=0.2, delta=0.05)
        result = score.train_tabular_score(q, rev, grid, tol=1e-12)
        assert result.excess.max() < 1e-10
        assert result.trace[0][1] > result.trace[-1][1]
        assert result.iterations >= 1

    def test_divergence_detected(self):
        q, prop, rev = backward_setup((0.8, 0.2), 1.0)
        grid = samplers.build_time_grid(1.0, kappa=0.5)
        with pytest.raises(Diverged):
            score.train_tabular_score(q, rev, grid, lr=1e300)

    def test_trained_provider_drives_tau_leaping(self):
        q, prop, rev = backward_setup((0.8, 0.2), 1.2)
        grid = samplers.build_time_grid(1.2, kappa=0.05, delta=0.05)
        result = score.train_tabular_score(q, rev, grid)
        run = samplers.run_tau_leaping(
            q, result.provider, grid, make_rng(77), n_paths=5000, policy="uniform"
        )
        emp = np.bincount(run.batch.terminal_states(), minlength=2) / 5000
        assert exact.tv_distance(emp, rev.at(grid.horizon).probs) < 0.04


# === mismatch estimators =======================================================


class TestEpsilonEstimators:
    def _paths(self, q, rev, horizon, n=400, seed=101):
        return prm.simulate_backward_exact(q, rev, horizon, make_rng(seed), n_paths=n)

    def test_exact_provider_has_zero_mismatch(self):
        q, prop, rev = backward_setup((0.8, 0.2), 1.0)
        batch = self._paths(q, rev, 0.95)
        cont = score.estimate_epsilon_continuous(q, score.ExactScore(rev), rev, batch)
        assert cont.estimate == 0.0 and cont.se == 0.0
        grid = samplers.build_time_grid(1.0, kappa=0.05, delta=0.05)
        disc = score.estimate_epsilon_discrete(q, score.ExactScore(rev), rev, grid, batch)
        assert disc.estimate == 0.0

    def test_scaled_provider_mismatch_is_k_of_c_times_intensity(self):
        q, prop, rev = backward_setup((0.75, 0.25), 1.0)
        batch = self._paths(q, rev, 0.9, n=200)
        c = 1.4
        provider = score.ScaledScore(score.ExactScore(rev), c)
        eps = score.estimate_epsilon_continuous(q, provider, rev, batch)
        back = prm.BackwardIntensity(q, rev)
        base = prm.integrate_along_paths(
            batch, lambda ts, xs: back.rate_rows(ts, xs).sum(axis=1), tol=1e-11
        )
        assert np.allclose(eps.per_path, K(c) * base, atol=1e-7)

    def test_discrete_riemann_approaches_continuous(self):
        q, prop, rev = backward_setup((0.75, 0.25), 1.0)
        horizon = 0.95
        batch = self._paths(q, rev, horizon, n=500, seed=7)
        provider = score.ScaledScore(score.ExactScore(rev), 1.2)
        cont = score.estimate_epsilon_continuous(q, provider, rev, batch)
        grid = samplers.build_time_grid(horizon + 0.05, kappa=0.01, delta=0.05)
        disc = score.estimate_epsilon_discrete(q, provider, rev, grid, batch)
        assert disc.estimate == pytest.approx(cont.estimate, rel=0.05)

    def test_nonpositive_provider_rejected(self):
        q, prop, rev = backward_setup((0.8, 0.2), 1.0)
        batch = self._paths(q, rev, 0.9, n=8)

        class Bad:
            clamp = 1.0

            def rows(self, s, states):
                return np.zeros((s.size, 2))

        with pytest.raises(NonPositiveScore):
            score.estimate_epsilon_continuous(q, Bad(), rev, batch)


class TestSerialization:
    def test_tabular_round_trip_preserves_graph_entries(self):
        space, q = ss.hypercube_rate_matrix(2)
        rng = make_rng(3, 0)
        theta = rng.normal(size=(3, 4, 4))
        tab = score.TabularScore(np.array([0.0, 0.4, 0.8, 1.2]), theta, clamp=5.0)
        back = score.tabular_from_json(score.tabular_to_json(tab, q))

        w = ss.off_diagonal(q)
        on_graph = w > 0.0
        for k in range(3):
            np.testing.assert_array_equal(
                back.log_ratios[k][on_graph], theta[k][on_graph]
            )
            assert np.all(back.log_ratios[k][~on_graph] == 0.0)
        np.testing.assert_array_equal(back.points, tab.points)
        assert back.clamp == 5.0
        # rows agree wherever an intensity could consume them
        s = np.array([0.1, 0.5, 1.1])
        states = np.array([0, 2, 3])
        got, want = back.rows(s, states), tab.rows(s, states)
        mask = on_graph[states]
        np.testing.assert_allclose(got[mask], want[mask], rtol=1e-15)

    def test_infinite_clamp_round_trips_as_null(self):
        q = two_state()
        tab = score.TabularScore(np.array([0.0, 1.0]), np.zeros((1, 2, 2)))
        text = score.tabular_to_json(tab, q)
        assert '"clamp": null' in text
        assert np.isinf(score.tabular_from_json(text).clamp)

    def test_block_count_mismatch_rejected(self):
        q = two_state()
        tab = score.TabularScore(np.array([0.0, 1.0]), np.zeros((1, 2, 2)))
        doc = score.tabular_to_json(tab, q).replace('"points": [0.0, 1.0]',
                                                    '"points": [0.0, 0.5, 1.0]')
        with pytest.raises(OutOfRange):
            score.tabular_from_json(doc)

    def test_trace_csv_shape(self):
        text = score.trace_to_csv([(0, 1.5), (25, 0.25)])
        assert text == "iter,loss\n0,1.5\n25,0.25\n"
