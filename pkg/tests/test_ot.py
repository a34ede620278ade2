"""Tests for the 1D optimal-transport core.

The closed-form solvers are checked against the exact LP oracles on random
small instances, plus metric-axioms property sweeps.
"""

import numpy as np
import pytest

from fedwb.errors import DimensionError, DomainError, SizeLimitError
from fedwb.ot import (
    BarycenterWeights,
    DiscreteDistribution,
    GroundCost,
    TransportPlan,
    barycenter_lp,
    barycenter_quantile,
    barycenter_quantile_atoms,
    solve_ot_lp,
    wasserstein_distance,
)


def delta(n, i):
    m = np.zeros(n)
    m[i] = 1.0
    return DiscreteDistribution(m)


def random_dist(rng, n, sparse=False):
    m = rng.random(n)
    if sparse:
        m *= rng.random(n) < 0.6
        if m.sum() == 0:
            m[rng.integers(n)] = 1.0
    return DiscreteDistribution(m / m.sum())


def tv(a, b):
    return 0.5 * np.abs(a.mass - b.mass).sum()


class TestDiscreteDistribution:
    def test_renormalizes_within_tolerance(self):
        d = DiscreteDistribution([0.25, 0.25, 0.25, 0.25 + 5e-10])
        assert d.mass.sum() == pytest.approx(1.0, abs=1e-15)

    def test_rejects_bad_sum(self):
        with pytest.raises(DomainError):
            DiscreteDistribution([0.5, 0.4])

    def test_rejects_negative(self):
        with pytest.raises(DomainError):
            DiscreteDistribution([1.1, -0.1])

    def test_rejects_empty(self):
        with pytest.raises(DomainError):
            DiscreteDistribution([])

    def test_clips_float_noise(self):
        d = DiscreteDistribution([1.0, -1e-15])
        assert d.mass[1] == 0.0


class TestGroundCost:
    def test_rejects_bad_exponent(self):
        with pytest.raises(DomainError):
            GroundCost(3)

    def test_matrix_values(self):
        c = GroundCost(2).matrix(3, 3)
        assert c[0, 2] == 4.0 and c[1, 1] == 0.0
        assert GroundCost(1).matrix(2, 4)[0, 3] == 3.0


class TestBarycenterWeights:
    def test_uniform(self):
        w = BarycenterWeights.uniform(4)
        assert np.allclose(w.lam, 0.25)

    def test_rejects_bad_sum(self):
        with pytest.raises(DomainError):
            BarycenterWeights([0.5, 0.6])


class TestWassersteinDistance:
    def test_identity_is_zero(self):
        a = DiscreteDistribution([0.25] * 4)
        assert wasserstein_distance(a, a, GroundCost(2)) == 0.0

    def test_translated_point_mass(self):
        assert wasserstein_distance(delta(4, 0), delta(4, 3), GroundCost(1)) == 3.0

    def test_block_shift(self):
        # Frozen via the LP oracle (checked again in test_matches_lp below).
        a = DiscreteDistribution([0.5, 0.5, 0.0, 0.0])
        b = DiscreteDistribution([0.0, 0.0, 0.5, 0.5])
        assert wasserstein_distance(a, b, GroundCost(1)) == pytest.approx(2.0)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            wasserstein_distance(delta(3, 0), delta(4, 0))

    def test_symmetry_and_nonnegativity(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            n = int(rng.integers(2, 20))
            a, b = random_dist(rng, n), random_dist(rng, n, sparse=True)
            for p in (1, 2):
                d_ab = wasserstein_distance(a, b, GroundCost(p))
                d_ba = wasserstein_distance(b, a, GroundCost(p))
                assert d_ab >= 0.0
                assert d_ab == pytest.approx(d_ba, abs=1e-12)
        assert wasserstein_distance(a, a) == 0.0

    def test_zero_iff_equal(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            a = random_dist(rng, 10)
            b = random_dist(rng, 10)
            if tv(a, b) > 1e-6:
                assert wasserstein_distance(a, b) > 1e-8

    def test_triangle_inequality(self):
        rng = np.random.default_rng(9)
        for _ in range(80):
            n = int(rng.integers(2, 16))
            a, b, c = (random_dist(rng, n, sparse=True) for _ in range(3))
            for p in (1, 2):
                cost = GroundCost(p)
                d_ac = wasserstein_distance(a, c, cost)
                d_ab = wasserstein_distance(a, b, cost)
                d_bc = wasserstein_distance(b, c, cost)
                assert d_ac <= d_ab + d_bc + 1e-8

    def test_matches_lp(self):
        rng = np.random.default_rng(10)
        for _ in range(40):
            n = int(rng.integers(2, 17))
            a = random_dist(rng, n, sparse=True)
            b = random_dist(rng, n, sparse=True)
            for p in (1, 2):
                cost = GroundCost(p)
                _, obj = solve_ot_lp(a, b, cost)
                closed = wasserstein_distance(a, b, cost) ** p
                assert closed == pytest.approx(obj, abs=1e-8)


class TestSolveOtLp:
    def test_identical_inputs_zero_objective(self):
        rng = np.random.default_rng(11)
        a = random_dist(rng, 6)
        plan, obj = solve_ot_lp(a, a)
        assert obj == pytest.approx(0.0, abs=1e-12)
        # All mass stays on the diagonal.
        off = plan.plan - np.diag(np.diag(plan.plan))
        assert np.abs(off).max() < 1e-9

    def test_point_mass_plan(self):
        plan, obj = solve_ot_lp(delta(4, 0), delta(4, 3), GroundCost(1))
        assert obj == pytest.approx(3.0)
        expected = np.zeros((4, 4))
        expected[0, 3] = 1.0
        assert np.allclose(plan.plan, expected, atol=1e-9)

    def test_feasibility(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            a = random_dist(rng, 5)
            b = random_dist(rng, 5, sparse=True)
            plan, _ = solve_ot_lp(a, b)
            plan.check_feasible(a, b)  # raises on violation

    def test_rectangular(self):
        rng = np.random.default_rng(13)
        a = random_dist(rng, 3)
        b = random_dist(rng, 7)
        plan, obj = solve_ot_lp(a, b, GroundCost(1))
        plan.check_feasible(a, b)
        assert obj >= 0.0

    def test_size_limit(self):
        big = DiscreteDistribution(np.full(65, 1 / 65))
        with pytest.raises(SizeLimitError):
            solve_ot_lp(big, big)


class TestTransportPlan:
    def test_rejects_negative(self):
        with pytest.raises(DomainError):
            TransportPlan(np.array([[0.5, -0.5], [0.0, 1.0]]))

    def test_infeasible_detected(self):
        plan = TransportPlan(np.array([[1.0, 0.0], [0.0, 0.0]]))
        with pytest.raises(DomainError):
            plan.check_feasible(delta(2, 0), delta(2, 1))


class TestBarycenterQuantile:
    def test_identical_inputs(self):
        rng = np.random.default_rng(20)
        a = random_dist(rng, 9)
        out = barycenter_quantile([a, a, a], BarycenterWeights.uniform(3))
        assert tv(out, a) < 1e-12

    def test_point_mass_midpoint(self):
        out = barycenter_quantile([delta(5, 0), delta(5, 4)],
                                  BarycenterWeights.uniform(2))
        assert tv(out, delta(5, 2)) == 0.0

    def test_one_hot_recovers_input(self):
        rng = np.random.default_rng(21)
        for p in (1, 2):
            inputs = [random_dist(rng, 8, sparse=True) for _ in range(3)]
            for k in range(3):
                lam = np.zeros(3)
                lam[k] = 1.0
                out = barycenter_quantile(inputs, BarycenterWeights(lam), GroundCost(p))
                assert tv(out, inputs[k]) < 1e-12

    def test_errors(self):
        a = delta(4, 0)
        with pytest.raises(DomainError):
            barycenter_quantile([], BarycenterWeights.uniform(1))
        with pytest.raises(DimensionError):
            barycenter_quantile([a, delta(5, 0)], BarycenterWeights.uniform(2))
        with pytest.raises(DimensionError):
            barycenter_quantile([a], BarycenterWeights.uniform(2))
        with pytest.raises(DomainError):
            barycenter_quantile([a], BarycenterWeights.uniform(1), projection="nearest")

    def test_matches_lp_oracle(self):
        rng = np.random.default_rng(22)
        for _ in range(40):
            n = int(rng.integers(2, 17))
            s = int(rng.integers(1, 5))
            inputs = [random_dist(rng, n, sparse=True) for _ in range(s)]
            lam = BarycenterWeights(np.diff(np.concatenate(
                [[0.0], np.sort(rng.random(s - 1)), [1.0]])) if s > 1 else [1.0])
            ours = barycenter_quantile(inputs, lam, GroundCost(2))
            oracle = barycenter_lp(inputs, lam, GroundCost(2))
            assert tv(ours, oracle) < 1e-6

    def test_interp_projection_preserves_mass_and_mean(self):
        rng = np.random.default_rng(23)
        inputs = [random_dist(rng, 6) for _ in range(2)]
        lam = BarycenterWeights([0.35, 0.65])
        out = barycenter_quantile(inputs, lam, projection="interp")
        pos, mass = barycenter_quantile_atoms(inputs, lam)
        # Linear splitting keeps the first moment of the free-support atoms.
        assert np.dot(np.arange(6), out.mass) == pytest.approx(np.dot(pos, mass))

    def test_translation_equivariance_free_support(self):
        rng = np.random.default_rng(24)
        shift = 3
        for _ in range(10):
            n = int(rng.integers(2, 10))
            inputs = [random_dist(rng, n) for _ in range(3)]
            lam = BarycenterWeights(rng.dirichlet(np.ones(3)))
            shifted = [DiscreteDistribution(np.concatenate([np.zeros(shift), d.mass]))
                       for d in inputs]
            pos, mass = barycenter_quantile_atoms(inputs, lam)
            pos_s, mass_s = barycenter_quantile_atoms(shifted, lam)
            assert np.allclose(mass, mass_s)
            assert np.allclose(pos + shift, pos_s, atol=1e-12)

    def test_weighted_median_p1_between_inputs(self):
        # For p=1 the barycenter quantile is a weighted median, so with a
        # dominant weight it snaps to that input.
        rng = np.random.default_rng(25)
        inputs = [random_dist(rng, 7) for _ in range(3)]
        lam = BarycenterWeights([0.6, 0.2, 0.2])
        out = barycenter_quantile(inputs, lam, GroundCost(1))
        assert tv(out, inputs[0]) < 1e-12


class TestBarycenterLp:
    def test_single_input(self):
        rng = np.random.default_rng(30)
        a = random_dist(rng, 6)
        out = barycenter_lp([a], BarycenterWeights.uniform(1))
        assert tv(out, a) < 1e-9

    def test_point_mass_midpoint(self):
        out = barycenter_lp([delta(3, 0), delta(3, 2)], BarycenterWeights.uniform(2))
        assert tv(out, delta(3, 1)) < 1e-9

    def test_objective_beats_random_probes(self):
        rng = np.random.default_rng(31)

        def objective(a, inputs, lam, cost):
            return sum(l * wasserstein_distance(a, b, cost) ** cost.p
                       for l, b in zip(lam.lam, inputs))

        for _ in range(3):
            inputs = [random_dist(rng, 4) for _ in range(3)]
            lam = BarycenterWeights(rng.dirichlet(np.ones(3)))
            cost = GroundCost(2)
            best = barycenter_lp(inputs, lam, cost)
            f_best = objective(best, inputs, lam, cost)
            for _ in range(1000):
                probe = random_dist(rng, 4)
                assert f_best <= objective(probe, inputs, lam, cost) + 1e-9

    def test_size_limits(self):
        a17 = DiscreteDistribution(np.full(17, 1 / 17))
        with pytest.raises(SizeLimitError):
            barycenter_lp([a17], BarycenterWeights.uniform(1))
        a4 = delta(4, 0)
        with pytest.raises(SizeLimitError):
            barycenter_lp([a4] * 5, BarycenterWeights.uniform(5))
