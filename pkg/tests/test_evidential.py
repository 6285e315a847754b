"""Dirichlet link, closed-form losses and entropy against Monte-Carlo oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dynsel import autodiff as ad
from dynsel.autodiff import finite_diff_check
from dynsel.evidential import (
    DirichletOpinion,
    alpha_from_logits,
    dirichlet_entropy,
    elbo_loss,
    expected_nll,
    kl_to_uniform,
    kl_weight_at,
    label_adjusted_alpha,
    one_hot,
    predictive_mean,
)
from dynsel.numerics import DomainError, RngStream, digamma, sample_dirichlet

LN2 = math.log(2.0)


def log_dir_pdf(mu, alpha):
    # independent of the package: stdlib lgamma only
    a = np.asarray(alpha, dtype=np.float64)
    norm = math.lgamma(a.sum()) - sum(math.lgamma(v) for v in a)
    return norm + ((a - 1.0) * np.log(mu)).sum(axis=-1)


def mc_mean(values):
    return values.mean(), values.std(ddof=1) / math.sqrt(len(values))


class TestLink:
    def test_zero_logits(self):
        np.testing.assert_allclose(alpha_from_logits(np.zeros(3)).data, 1.0 + LN2, atol=1e-15)

    def test_example_vector(self):
        ref = np.array([1.0 + math.log1p(math.exp(3.0)), 1.0 + LN2, 1.0 + math.log1p(math.exp(-3.0))])
        np.testing.assert_allclose(alpha_from_logits([3.0, 0.0, -3.0]).data, ref, atol=1e-12)
        np.testing.assert_allclose(ref, [4.048587, 1.693147, 1.048587], atol=1e-6)

    def test_no_evidence_limit(self):
        assert alpha_from_logits([-50.0]).data[0] == pytest.approx(1.0, abs=1e-20)

    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=6))
    def test_alpha_exceeds_one(self, z):
        assert np.all(alpha_from_logits(z).data > 1.0)

    def test_non_finite(self):
        with pytest.raises(DomainError):
            alpha_from_logits([0.0, float("nan")])

    def test_opinion_validation(self):
        with pytest.raises(DomainError):
            DirichletOpinion(np.array([1.0, 0.0]))


class TestPredictiveMean:
    @pytest.mark.parametrize("alpha, mean", [((1, 1), (0.5, 0.5)), ((3, 1), (0.75, 0.25)), ((7, 1), (0.875, 0.125))])
    def test_examples(self, alpha, mean):
        np.testing.assert_allclose(predictive_mean(np.asarray(alpha, float)).data, mean, atol=1e-15)

    def test_opinion_method(self):
        assert DirichletOpinion(np.array([3.0, 1.0])).mean()[0] == 0.75


class TestExpectedNll:
    def test_flat_binary_is_one(self):
        assert float(expected_nll(np.array([1.0, 1.0]), 0).data) == pytest.approx(1.0, abs=1e-14)

    def test_flat_ten_class(self, rng):
        val = float(expected_nll(np.ones(10), 4).data)
        assert val == pytest.approx(digamma(10.0) - digamma(1.0), abs=1e-12)
        est, se = mc_mean(-np.log(sample_dirichlet(np.ones(10), rng, size=50_000)[:, 4]))
        assert abs(val - est) <= 3 * se

    def test_monotone_in_true_evidence(self):
        assert 0 < float(expected_nll(np.array([10.0, 1.0]), 0).data) < float(expected_nll(np.array([1.0, 10.0]), 0).data)

    def test_invalid_class(self):
        with pytest.raises(IndexError):
            expected_nll(np.array([2.0, 2.0]), 2)


class TestKl:
    def test_flat_is_zero(self):
        y = one_hot(np.array(1), 3)
        assert float(kl_to_uniform(np.array([1.0, 5.0, 1.0]), y).data) == pytest.approx(0.0, abs=1e-12)

    def test_hand_value(self, rng):
        # alpha_tilde = (2, 1): label 1 adjusts the second entry to one
        val = float(kl_to_uniform(np.array([2.0, 9.0]), one_hot(np.array(1), 2)).data)
        assert val == pytest.approx(LN2 - 0.5, abs=1e-12)
        mu = sample_dirichlet([2.0, 1.0], rng, size=50_000)
        est, se = mc_mean(log_dir_pdf(mu, [2.0, 1.0]) - math.lgamma(2.0))
        assert abs(val - est) <= 3 * se

    def test_label_adjustment(self):
        out = label_adjusted_alpha(np.array([[3.0, 4.0, 5.0]]), one_hot(np.array([2]), 3)).data
        np.testing.assert_array_equal(out, [[3.0, 4.0, 1.0]])

    def test_malformed_one_hot(self):
        with pytest.raises(ValueError):
            kl_to_uniform(np.array([2.0, 2.0]), np.array([0.5, 0.5]))

    @given(st.lists(st.floats(1.0, 20.0), min_size=2, max_size=8), st.integers(0, 7))
    def test_nonnegative_and_zero_iff_flat(self, alpha, c):
        a = np.asarray(alpha)
        c = c % len(a)
        kl = float(kl_to_uniform(a, one_hot(np.array(c), len(a))).data)
        assert kl >= -1e-12
        others = np.delete(a, c)
        if np.all(np.abs(others - 1.0) < 1e-12):
            assert abs(kl) < 1e-10
        elif np.max(np.abs(others - 1.0)) > 1e-3:
            assert kl > 1e-10


class TestElbo:
    def test_parts_compose(self):
        a = np.array([[3.0, 2.0], [1.5, 4.0]])
        parts = elbo_loss(a, np.array([0, 1]), kl_weight=0.3)
        assert float(parts.total.data) == pytest.approx(float(parts.nll.data) + 0.3 * float(parts.kl.data), abs=1e-15)

    def test_zero_kl_weight(self):
        a = np.array([[3.0, 2.0]])
        parts = elbo_loss(a, np.array([1]), kl_weight=0.0)
        assert float(parts.total.data) == float(parts.nll.data)

    def test_batch_mean_equals_mean_of_singles(self):
        a = RngStream(3).uniform(1, 6, size=(3, 4))
        y = np.array([0, 3, 1])
        batch = float(elbo_loss(a, y).total.data)
        singles = [float(elbo_loss(a[i:i + 1], y[i:i + 1]).total.data) for i in range(3)]
        assert batch == pytest.approx(np.mean(singles), abs=1e-14)

    def test_nll_decreases_with_true_evidence(self):
        vals = [float(elbo_loss(np.array([[t, 1.0]]), np.array([0])).nll.data) for t in (1, 2, 5, 20, 100, 1000)]
        assert all(b < a for a, b in zip(vals, vals[1:]))

    def test_differentiable_through_link(self):
        y = np.array([0, 2])

        def f(z):
            return elbo_loss(alpha_from_logits(z), y, kl_weight=0.7).total

        assert finite_diff_check(f, RngStream(4).normal(size=(2, 3)), 1e-6) < 1e-4

    def test_kl_warmup(self):
        assert kl_weight_at(0, 20, 1.0, warmup=False) == 1.0
        assert kl_weight_at(0, 20, 1.0, warmup=True) < kl_weight_at(3, 20, 1.0, warmup=True)
        assert kl_weight_at(5, 20, 1.0, warmup=True) == 1.0
        assert kl_weight_at(19, 20, 2.0, warmup=True) == 2.0


class TestEntropy:
    def test_uniform_beta(self):
        assert float(dirichlet_entropy(np.array([1.0, 1.0])).data) == pytest.approx(0.0, abs=1e-14)

    def test_flat_three_class(self):
        assert float(dirichlet_entropy(np.ones(3)).data) == pytest.approx(-LN2, abs=1e-14)

    @pytest.mark.parametrize("alpha", [(5.0, 5.0), (2.0, 7.0, 1.5)])
    def test_against_monte_carlo(self, alpha, rng):
        mu = sample_dirichlet(alpha, rng, size=50_000)
        est, se = mc_mean(-log_dir_pdf(mu, alpha))
        assert abs(float(dirichlet_entropy(np.asarray(alpha)).data) - est) <= 3 * se

    def test_decreases_along_evidence_ray(self):
        v = np.array([0.5, 2.0, 1.0])
        vals = [float(dirichlet_entropy(1.0 + t * v).data) for t in np.linspace(0.1, 50, 40)]
        assert all(b < a for a, b in zip(vals, vals[1:]))

    def test_batched(self):
        a = np.array([[1.0, 1.0], [5.0, 5.0]])
        out = dirichlet_entropy(a).data
        assert out.shape == (2,)
        assert out[1] == float(dirichlet_entropy(a[1]).data)

    def test_gradient(self):
        assert finite_diff_check(lambda t: dirichlet_entropy(t).sum(), RngStream(5).uniform(1, 5, size=(2, 3)), 1e-6) < 1e-4
