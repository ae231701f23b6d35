"""Action probabilities, mass propagation, stopping times, and counting."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from socarb.market_data import DayPrices, PriceBounds, fit_distribution
from socarb.reachability import (
    ActionProbs,
    KappaPolicy,
    TargetBand,
    action_probabilities,
    brute_force_distribution,
    count_feasible_trajectories,
    kappa_prepolicy,
    mix_over_kappa,
    policy_action_probabilities,
    propagate,
    stopping_time,
    terminal_band_probability,
)
from socarb.thresholds import BatteryParams


class UniformCdf:
    """Continuous uniform CDF on [lo, hi] for probability arithmetic checks."""

    def __init__(self, lo, hi):
        self.lo, self.hi = lo, hi

    def prob_le(self, x):
        return min(1.0, max(0.0, (x - self.lo) / (self.hi - self.lo)))

    def prob_ge(self, x):
        return 1.0 - self.prob_le(x)

    def sample(self, rng):
        return float(rng.uniform(self.lo, self.hi))


def uniform_probs(n):
    third = 1.0 / 3.0
    return [ActionProbs(third, third, 1.0 - 2.0 * third) for _ in range(n)]


def random_probs(rng, n):
    out = []
    for _ in range(n):
        a, b, g = rng.dirichlet([1.0, 1.0, 1.0])
        out.append(ActionProbs(float(a), float(b), 1.0 - float(a) - float(b)))
    return out


def band(lo, hi):
    return TargetBand.from_interval(lo, hi)


class TestActionProbabilities:
    def test_uniform_cdf_arithmetic(self):
        ap = action_probabilities(30.0, 70.0, UniformCdf(0, 100))
        assert (ap.alpha, ap.beta, ap.gamma) == pytest.approx((0.3, 0.3, 0.4))

    def test_both_inactive(self):
        ap = action_probabilities(None, None, UniformCdf(0, 100))
        assert (ap.alpha, ap.beta, ap.gamma) == (0.0, 0.0, 1.0)

    def test_adjacent_thresholds_squeeze_idle(self):
        ap = action_probabilities(50.0, 50.0 + 1e-9, UniformCdf(0, 100))
        assert ap.gamma == pytest.approx(0.0, abs=1e-10)
        assert ap.alpha + ap.beta == pytest.approx(1.0)

    def test_overlapping_thresholds_rejected(self):
        with pytest.raises(ValueError, match="u < l"):
            action_probabilities(70.0, 30.0, UniformCdf(0, 100))

    def test_malformed_cdf_rejected(self):
        class Bad:
            def prob_le(self, x):
                return 1.4

            def prob_ge(self, x):
                return -0.2

        with pytest.raises(ValueError, match="malformed CDF"):
            action_probabilities(10.0, 90.0, Bad())

    def test_discharge_inclusive_at_threshold(self):
        days = [DayPrices("a", (30.0,)), DayPrices("b", (50.0,))]
        cdf = fit_distribution(days).cdf(1)
        ap = action_probabilities(10.0, 50.0, cdf)
        assert ap.beta == pytest.approx(0.5)  # P(price >= 50) counts the atom at 50


class TestPropagate:
    def test_full_battery_folds_charge_mass(self):
        params = BatteryParams(0, 10, 2, 10, 1)
        dist = propagate(params, [ActionProbs(0.5, 0.3, 0.2)], 5, 5)
        assert dist.terminal_marginal() == pytest.approx({10.0: 0.7, 8.0: 0.3})

    def test_two_step_uniform_path_enumeration(self):
        params = BatteryParams(0, 10, 2, 5, 2)
        dist = propagate(params, uniform_probs(2), 5, 5)
        expected = {1.0: 1 / 9, 3.0: 2 / 9, 5.0: 3 / 9, 7.0: 2 / 9, 9.0: 1 / 9}
        assert dist.terminal_marginal() == pytest.approx(expected)

    def test_charge_budget_zero_monotone_down(self):
        params = BatteryParams(0, 10, 2, 6, 3)
        dist = propagate(params, uniform_probs(3), 0, 3)
        assert all(e <= 6.0 + 1e-12 for e in dist.terminal_marginal())

    def test_budget_enforced_in_augmented_mode(self):
        params = BatteryParams(0, 100, 2, 50, 4)
        dist = propagate(params, uniform_probs(4), 1, 0)
        assert max(dist.terminal_marginal()) <= 52.0 + 1e-12

    @given(st.integers(0, 100))
    @settings(max_examples=40, deadline=None)
    def test_mass_conserved_every_step(self, seed):
        rng = np.random.default_rng(seed)
        horizon = int(rng.integers(1, 9))
        e0 = float(rng.integers(0, 11))
        params = BatteryParams(0, 10, 2, e0, horizon)
        probs = random_probs(rng, horizon)
        for mode in ("augmented", "marginal"):
            dist = propagate(params, probs, int(rng.integers(0, 4)), int(rng.integers(0, 4)), mode)
            for t in range(horizon + 1):
                assert abs(math.fsum(dist.per_step[t].values()) - 1.0) <= 1e-12

    def test_support_stays_inside_capacity(self):
        rng = np.random.default_rng(9)
        params = BatteryParams(2, 8, 2, 4, 6)
        dist = propagate(params, random_probs(rng, 6), 6, 6)
        for t in range(7):
            for e in dist.marginal(t):
                assert 2 - 1e-9 <= e <= 8 + 1e-9

    def test_lattice_identity_augmented(self):
        rng = np.random.default_rng(21)
        params = BatteryParams(0, 10, 2, 5, 5)
        dist = propagate(params, random_probs(rng, 5), 3, 3)
        for t in range(6):
            for (m, c, d), mass in dist.per_step[t].items():
                assert m == c - d
                assert c <= 3 and d <= 3

    def test_matches_brute_force_small(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            horizon = int(rng.integers(1, 7))
            params = BatteryParams(0, 10, 2, float(rng.integers(0, 11)), horizon)
            probs = random_probs(rng, horizon)
            k_ch, k_dis = int(rng.integers(0, 4)), int(rng.integers(0, 4))
            fast = propagate(params, probs, k_ch, k_dis)
            slow = brute_force_distribution(params, probs, k_ch, k_dis)
            for t in range(horizon + 1):
                keys = set(fast.per_step[t]) | set(slow.per_step[t])
                for key in keys:
                    a = fast.per_step[t].get(key, 0.0)
                    b = slow.per_step[t].get(key, 0.0)
                    assert abs(a - b) < 1e-12

    def test_brute_force_guard(self):
        params = BatteryParams(0, 10, 2, 5, 11)
        with pytest.raises(ValueError, match="horizon"):
            brute_force_distribution(params, uniform_probs(11), 2, 2)


class TestTerminalBand:
    def test_whole_lattice_band(self):
        params = BatteryParams(0, 10, 2, 5, 3)
        dist = propagate(params, uniform_probs(3), 3, 3)
        assert terminal_band_probability(dist, band(0, 10)) == pytest.approx(1.0)

    def test_enumerated_band_mass(self):
        params = BatteryParams(0, 10, 2, 5, 2)
        dist = propagate(params, uniform_probs(2), 5, 5)
        assert terminal_band_probability(dist, band(5, 7)) == pytest.approx(5 / 9)

    def test_parity_mismatch_zero(self):
        params = BatteryParams(0, 10, 2, 5, 2)
        dist = propagate(params, uniform_probs(2), 5, 5)
        assert terminal_band_probability(dist, band(5.5, 6.5)) == 0.0

    def test_widening_never_decreases(self):
        rng = np.random.default_rng(13)
        params = BatteryParams(0, 10, 2, 4, 5)
        dist = propagate(params, random_probs(rng, 5), 5, 5)
        p_narrow = terminal_band_probability(dist, band(4, 6))
        p_wide = terminal_band_probability(dist, band(3, 7))
        assert p_wide >= p_narrow

    def test_equivalent_to_trade_count_bounds(self):
        # band mass equals the mass with s_lo <= n_ch - n_dis <= s_hi
        rng = np.random.default_rng(17)
        params = BatteryParams(0, 10, 2, 5, 6)
        dist = propagate(params, random_probs(rng, 6), 4, 4)
        target = band(3, 7)
        s_lo, s_hi = target.count_bounds(params.e0, params.rate)
        by_counts = math.fsum(
            mass
            for (m, c, d), mass in dist.per_step[dist.horizon].items()
            if s_lo - 1e-9 <= c - d <= s_hi + 1e-9
        )
        assert terminal_band_probability(dist, target) == pytest.approx(by_counts, abs=1e-12)


class TestKappa:
    def test_identity_mix(self):
        kappa = KappaPolicy({(1, 1): 1.0})
        assert mix_over_kappa({(1, 1): 0.42}, kappa) == pytest.approx(0.42)

    def test_convex_combination(self):
        kappa = KappaPolicy({(1, 1): 0.5, (2, 2): 0.5})
        assert mix_over_kappa({(1, 1): 0.4, (2, 2): 0.8}, kappa) == pytest.approx(0.6)

    def test_key_mismatch_rejected(self):
        kappa = KappaPolicy({(1, 1): 1.0})
        with pytest.raises(ValueError):
            mix_over_kappa({(2, 2): 0.4}, kappa)

    def _setup(self, values_by_hour):
        days = [DayPrices(f"d{i}", tuple(vals)) for i, vals in enumerate(values_by_hour)]
        from socarb.market_data import compute_bounds

        return compute_bounds(days, 1), fit_distribution(days)

    def test_constant_prices_fall_back_to_idle_pair(self):
        bounds, dist = self._setup([[20.0, 20.0, 20.0, 20.0]] * 3)
        params = BatteryParams(0, 10, 2, 4, 4)
        kappa = kappa_prepolicy([(1, 1), (2, 2)], params, bounds, dist, n_sims=20, seed=1)
        assert kappa.weights == {(0, 0): 1.0}

    def test_profitable_pairs_share_uniformly(self):
        # strong alternating spread: all three pairs profitable, 1/3 each
        bounds, dist = self._setup([[5.0, 100.0, 5.0, 100.0]] * 4)
        params = BatteryParams(0, 10, 2, 4, 4)
        pairs = [(1, 1), (2, 2), (1, 2)]
        kappa = kappa_prepolicy(pairs, params, bounds, dist, n_sims=30, seed=2)
        assert kappa.weights == {pair: pytest.approx(1 / 3) for pair in pairs}

    def test_deterministic_given_seed(self):
        bounds, dist = self._setup([[5.0, 80.0, 10.0, 60.0], [8.0, 70.0, 6.0, 90.0]])
        params = BatteryParams(0, 10, 2, 4, 4)
        a = kappa_prepolicy([(1, 1), (1, 2)], params, bounds, dist, n_sims=25, seed=9)
        b = kappa_prepolicy([(1, 1), (1, 2)], params, bounds, dist, n_sims=25, seed=9)
        assert a == b


class TestStoppingTime:
    def test_tau_star_first_crossing(self):
        # idle mode on a narrowing distribution: compare against the rule on Q
        params = BatteryParams(0, 10, 2, 5, 4)
        rng = np.random.default_rng(2)
        probs = random_probs(rng, 4)
        result = stopping_time(params, probs, band(3, 7), 0.1, "idle")
        threshold = 1.0 - 0.1
        for t, q in enumerate(result.big_q, start=1):
            if result.tau_star is not None and t < result.tau_star:
                assert q < threshold
        if result.tau_star is not None:
            assert result.big_q[result.tau_star - 1] >= threshold

    def test_full_control_whole_range_stops_immediately(self):
        params = BatteryParams(0, 10, 2, 5, 4)
        result = stopping_time(params, uniform_probs(4), band(0, 10), 0.1, "full-control")
        assert all(q == 1.0 for q in result.big_q)
        assert result.tau_star == 1

    def test_full_control_reachability_example(self):
        # from t=1 every reachable state {3,5,7} can still reach [5,7] by T=2
        params = BatteryParams(0, 10, 2, 5, 2)
        result = stopping_time(params, uniform_probs(2), band(5, 7), 0.1, "full-control")
        assert result.big_q[0] == pytest.approx(1.0)

    def test_idle_mode_equals_marginal_band_mass(self):
        params = BatteryParams(0, 10, 2, 5, 5)
        rng = np.random.default_rng(8)
        probs = random_probs(rng, 5)
        result = stopping_time(params, probs, band(3, 7), 0.2, "idle")
        dist = propagate(params, probs, 5, 5, mode="marginal")
        for t in range(1, 6):
            direct = math.fsum(
                mass for e, mass in dist.marginal(t).items() if 3 - 1e-9 <= e <= 7 + 1e-9
            )
            assert result.big_q[t - 1] == pytest.approx(direct, abs=1e-12)

    def test_continue_policy_q_is_constant(self):
        # continuing the policy means Q_t equals the unconditional band mass
        params = BatteryParams(0, 10, 2, 5, 6)
        rng = np.random.default_rng(14)
        probs = random_probs(rng, 6)
        result = stopping_time(params, probs, band(3, 7), 0.5, "continue-policy")
        assert max(result.big_q) - min(result.big_q) < 1e-12

    def test_band_widening_never_decreases_q(self):
        params = BatteryParams(0, 10, 2, 5, 5)
        rng = np.random.default_rng(3)
        probs = random_probs(rng, 5)
        for mode in ("idle", "full-control"):
            narrow = stopping_time(params, probs, band(4, 6), 0.1, mode)
            wide = stopping_time(params, probs, band(3, 8), 0.1, mode)
            assert all(w >= n - 1e-12 for n, w in zip(narrow.big_q, wide.big_q))

    def test_tau_star_none_is_valid(self):
        params = BatteryParams(0, 10, 2, 1, 2)
        result = stopping_time(params, uniform_probs(2), band(9, 10), 0.01, "idle")
        assert result.tau_star is None

    def test_epsilon_validated(self):
        params = BatteryParams(0, 10, 2, 5, 2)
        with pytest.raises(ValueError):
            stopping_time(params, uniform_probs(2), band(3, 7), 1.5, "idle")


class TestCounting:
    @pytest.mark.parametrize(
        "e0,steps,expected",
        [(1.0, 2, (1, 5)), (1.0, 4, (13, 35)), (1.0, 8, (901, 1931))],
    )
    def test_reference_counts(self, e0, steps, expected):
        params = BatteryParams(0, 10, 2, e0, steps)
        in_band, total, pct = count_feasible_trajectories(params, steps, band(5, 7))
        assert (in_band, total) == expected
        assert pct == pytest.approx(100.0 * expected[0] / expected[1])

    def test_mirror_symmetry_exact(self):
        for e0 in (1.0, 3.0, 9.0):
            for lo, hi in ((5.0, 7.0), (3.0, 8.0)):
                for steps in (2, 4, 6):
                    p1 = BatteryParams(0, 10, 2, e0, steps)
                    p2 = BatteryParams(0, 10, 2, 10 - e0, steps)
                    direct = count_feasible_trajectories(p1, steps, band(lo, hi))
                    mirror = count_feasible_trajectories(p2, steps, band(10 - hi, 10 - lo))
                    assert direct == mirror

    def test_steps_validated(self):
        params = BatteryParams(0, 10, 2, 5, 2)
        with pytest.raises(ValueError):
            count_feasible_trajectories(params, 0, band(3, 7))


def test_policy_action_probabilities_shapes_and_sums():
    days = [
        DayPrices(f"d{i}", tuple(float(v) for v in row))
        for i, row in enumerate(
            np.exp(np.random.default_rng(0).normal(3.0, 0.5, size=(30, 6)))
        )
    ]
    from socarb.market_data import compute_bounds

    bounds = compute_bounds(days, 1)
    dist = fit_distribution(days)
    params = BatteryParams(0, 10, 2, 4, 6)
    probs = policy_action_probabilities(params, dist, bounds, 2, 2)
    assert len(probs) == 6
    for ap in probs:
        assert abs(ap.alpha + ap.beta + ap.gamma - 1.0) <= 1e-12
