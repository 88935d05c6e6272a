import math

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from dcgen.oracle import (ProbTable, finite_difference_check,
                          fit_tabular_contrastive, fit_tabular_ipw,
                          kl_divergence, random_tabular_instance,
                          target_distribution_r, total_variation)


class TestTargetDistribution:
    def test_hand_case(self):
        r = target_distribution_r(np.array([0.5, 0.3, 0.2]),
                                  np.array([0.5, 0.25, 0.25]))
        # ratios are [1.0, 1.2, 0.8] with normalizer 3.0
        assert np.allclose(r, [1.0 / 3.0, 0.4, 0.8 / 3.0], atol=1e-12)
        assert np.allclose(r, [0.33333, 0.40000, 0.26667], atol=1e-5)

    def test_uniform_proposal_recovers_data(self):
        p = np.array([0.6, 0.3, 0.1])
        r = target_distribution_r(p, np.full(3, 1 / 3))
        assert np.allclose(r, p, atol=1e-15)

    def test_matched_proposal_gives_uniform(self):
        p = np.array([0.6, 0.3, 0.1])
        r = target_distribution_r(p, p)
        assert np.allclose(r, np.full(3, 1 / 3), atol=1e-15)

    def test_zero_propensity_rejected(self):
        with pytest.raises(ValueError, match="propensity"):
            target_distribution_r(np.array([0.5, 0.5]), np.array([1.0, 0.0]))


class TestKlDivergence:
    def test_identical_rows(self):
        assert kl_divergence(np.array([0.3, 0.7]), np.array([0.3, 0.7])) == 0.0

    def test_point_mass_vs_uniform(self):
        got = kl_divergence(np.array([1.0, 0.0]), np.array([0.5, 0.5]))
        assert got == pytest.approx(math.log(2), abs=1e-12)

    def test_hand_arithmetic(self):
        got = kl_divergence(np.array([0.5, 0.5]), np.array([0.9, 0.1]))
        want = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
        assert want == pytest.approx(0.510826, abs=1e-6)
        assert got == pytest.approx(want, abs=1e-15)

    def test_support_violation(self):
        with pytest.raises(ValueError):
            kl_divergence(np.array([0.5, 0.5]), np.array([1.0, 0.0]))

    @given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=8))
    @settings(max_examples=60, deadline=None)
    def test_non_negative_zero_iff_equal(self, raw):
        p = np.asarray(raw)
        p = p / p.sum()
        rng = np.random.default_rng(1)
        q = rng.dirichlet(np.ones(len(p)))
        assert kl_divergence(p, q) >= 0
        assert kl_divergence(p, p) <= 1e-12


class TestFitTabularIpw:
    def test_analytic_path_is_exact(self):
        p = ProbTable(np.array([[0.5, 0.3, 0.2]]))
        q = ProbTable(np.array([[0.5, 0.25, 0.25]]))
        fit = fit_tabular_ipw(p, q)
        want = target_distribution_r(p.rows[0], q.rows[0])
        assert np.array_equal(fit.table.rows[0], want)

    def test_descent_reaches_target(self):
        rng = np.random.default_rng(3)
        p, q = random_tabular_instance(3, 8, 0.02, rng)
        fit = fit_tabular_ipw(p, q)
        assert fit.kl_to_target <= 1e-8

    def test_uniform_proposal_returns_data(self):
        p = ProbTable(np.array([[0.7, 0.2, 0.1]]))
        q = ProbTable(np.full((1, 3), 1 / 3))
        fit = fit_tabular_ipw(p, q)
        assert np.allclose(fit.table.rows[0], p.rows[0], atol=1e-15)

    def test_single_item_point_mass(self):
        p = ProbTable(np.array([[1.0]]))
        q = ProbTable(np.array([[1.0]]))
        fit = fit_tabular_ipw(p, q)
        assert fit.table.rows[0][0] == 1.0
        assert fit.kl_to_target <= 1e-12


class TestFitTabularContrastive:
    def test_single_context_converges_to_ratio_target(self):
        rng = np.random.default_rng(17)
        p, q = random_tabular_instance(1, 8, 0.02, rng)
        fit = fit_tabular_contrastive(p, q, L=7, steps=200_000,
                                      lr_schedule=(0.5, 0.01), seed=99)
        r = target_distribution_r(p.rows[0], q.rows[0])
        assert fit.converged
        assert total_variation(fit.table.rows[0], r) <= 0.02

    def test_matched_proposal_learns_uniform(self):
        rng = np.random.default_rng(23)
        p, _ = random_tabular_instance(1, 8, 0.02, rng)
        fit = fit_tabular_contrastive(p, p, L=7, steps=200_000,
                                      lr_schedule=(0.5, 0.01), seed=5)
        uniform = np.full(8, 1 / 8)
        assert total_variation(fit.table.rows[0], uniform) <= 0.02

    def test_uniform_proposal_is_mle_limit(self):
        # with a uniform proposal the ratio target IS p_data, so the
        # contrastive fit lands on the maximum-likelihood solution
        rng = np.random.default_rng(29)
        p, _ = random_tabular_instance(1, 8, 0.02, rng)
        q = ProbTable(np.full((1, 8), 1 / 8))
        fit = fit_tabular_contrastive(p, q, L=7, steps=200_000,
                                      lr_schedule=(0.5, 0.01), seed=6)
        assert total_variation(fit.table.rows[0], p.rows[0]) <= 0.02

    def test_large_item_set_rejected(self):
        p = ProbTable(np.full((1, 64), 1 / 64))
        with pytest.raises(ValueError):
            fit_tabular_contrastive(p, p, L=7, steps=10,
                                    lr_schedule=(0.5, 0.01), seed=0)


class TestRandomInstance:
    def test_min_prob_floor(self):
        rng = np.random.default_rng(0)
        p, q = random_tabular_instance(4, 8, 0.02, rng)
        assert p.rows.min() >= 0.02 and q.rows.min() >= 0.02
        assert np.allclose(p.rows.sum(axis=1), 1.0, atol=1e-12)


class TestFiniteDifferenceCheck:
    def test_quadratic(self):
        x = np.array([3.0])
        err = finite_difference_check(lambda v: float(v[0] ** 2),
                                      grad=np.array([6.0]), x=x, coords=[0],
                                      eps=1e-5)
        assert err <= 1e-9

    def test_zero_gradient_degenerate(self):
        x = np.array([1.0, 2.0])
        err = finite_difference_check(lambda v: 5.0,
                                      grad=np.zeros(2), x=x, coords=[0, 1],
                                      eps=1e-5)
        assert err == 0.0

    def test_eps_bounds(self):
        with pytest.raises(ValueError):
            finite_difference_check(lambda v: 0.0, np.zeros(1),
                                    np.zeros(1), [0], eps=1.0)

    def test_detects_wrong_gradient(self):
        x = np.array([2.0])
        err = finite_difference_check(lambda v: float(v[0] ** 2),
                                      grad=np.array([17.0]), x=x, coords=[0])
        assert err > 0.1
