import math

import numpy as np
import pytest

from bnnlab import tensor as T
from bnnlab.tensor import Tensor, backward, finite_difference_grad
from bnnlab.variational import (
    PriorSpec,
    VariationalParam,
    cross_entropy,
    elbo_loss,
    kl_gaussian,
    mc_kl,
    rho_for_sigma,
    sample_weights,
    sigma_from_rho,
)


def _param(mu, sigma):
    mu = np.asarray(mu, dtype=np.float64)
    rho = np.full_like(mu, rho_for_sigma(sigma)) if np.isscalar(sigma) else np.asarray(sigma)
    return VariationalParam(Tensor(mu.copy()), Tensor(rho.copy()))


def _closed_form(mu, sigma, sigma_p):
    return np.sum(np.log(sigma_p / sigma) + (sigma**2 + mu**2) / (2 * sigma_p**2) - 0.5)


class TestSigmaParameterization:
    def test_softplus_zero_is_log_two(self):
        assert abs(sigma_from_rho(Tensor(0.0)).item() - math.log(2.0)) < 1e-12

    def test_inverse_softplus_value(self):
        # rho giving sigma 0.15 is log(e^0.15 - 1)
        expected = math.log(math.exp(0.15) - 1.0)
        assert abs(rho_for_sigma(0.15) - expected) < 1e-12
        assert abs(expected - (-1.8211826606)) < 1e-9

    def test_round_trip(self):
        for s in [0.01, 0.15, 1.0, 3.0]:
            assert abs(sigma_from_rho(Tensor(rho_for_sigma(s))).item() - s) < 1e-12

    def test_sigma_positive_everywhere(self):
        rho = Tensor(np.linspace(-20, 5, 50))
        assert (sigma_from_rho(rho).data > 0).all()

    def test_bad_sigma_rejected(self):
        with pytest.raises(ValueError):
            rho_for_sigma(0.0)


class TestSampling:
    def test_reparameterization_formula(self):
        p = _param(np.array([0.2, -0.4]), 0.3)
        noise = np.array([1.0, -2.0])
        got = sample_weights(p, noise).data
        want = p.mu.data + np.logaddexp(0, p.rho.data) * noise
        np.testing.assert_allclose(got, want, atol=1e-15)

    def test_sample_moments(self):
        from bnnlab.rng import RandomStream

        p = _param(np.full(4, 0.5), 0.15)
        draws = np.stack(
            [sample_weights(p, RandomStream(s).normal((4,))).data for s in range(25000)]
        )
        assert abs(draws.mean() - 0.5) < 0.003
        assert abs(draws.std() - 0.15) < 0.003

    def test_gradient_flows_to_mu_and_rho(self):
        p = _param(np.array([0.1]), 0.2)
        w = sample_weights(p, np.array([0.7]))
        grads = backward(T.tensor_sum(T.mul(w, w)))
        assert p.mu in grads and p.rho in grads

    def test_noise_shape_checked(self):
        with pytest.raises(ValueError):
            sample_weights(_param(np.zeros(3), 0.1), np.zeros(4))


class TestClosedFormKL:
    def test_unit_case_is_half(self):
        kl = kl_gaussian(_param(np.array([1.0]), 1.0), PriorSpec(1.0))
        assert abs(kl.item() - 0.5) < 1e-12

    def test_matches_numpy_formula(self):
        rng = np.random.default_rng(10)
        mu = rng.normal(size=(3, 4))
        sigma = rng.uniform(0.05, 2.0, size=(3, 4))
        p = VariationalParam(Tensor(mu), Tensor(np.log(np.expm1(sigma))))
        for sp in [0.15, 0.5, 1.0]:
            got = kl_gaussian(p, PriorSpec(sp)).item()
            np.testing.assert_allclose(got, _closed_form(mu, sigma, sp), rtol=1e-12)

    def test_zero_when_posterior_equals_prior(self):
        kl = kl_gaussian(_param(np.zeros(5), 0.15), PriorSpec(0.15))
        assert abs(kl.item()) < 1e-12

    def test_nonnegative(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            mu = rng.normal(size=6)
            sigma = rng.uniform(0.05, 2.0, size=6)
            p = VariationalParam(Tensor(mu), Tensor(np.log(np.expm1(sigma))))
            assert kl_gaussian(p, PriorSpec(rng.uniform(0.1, 2.0))).item() >= 0.0

    def test_gradients_match_finite_differences(self):
        mu0 = np.array([0.3, -0.8, 0.1])
        rho0 = np.array([-1.0, 0.5, -2.0])
        prior = PriorSpec(0.15)
        p = VariationalParam(Tensor(mu0.copy()), Tensor(rho0.copy()))
        grads = backward(kl_gaussian(p, prior))

        fd_mu = finite_difference_grad(
            lambda t: kl_gaussian(VariationalParam(t, Tensor(rho0.copy())), prior), Tensor(mu0)
        )
        fd_rho = finite_difference_grad(
            lambda t: kl_gaussian(VariationalParam(Tensor(mu0.copy()), t), prior), Tensor(rho0)
        )
        np.testing.assert_allclose(grads[p.mu], fd_mu, rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(grads[p.rho], fd_rho, rtol=1e-6, atol=1e-8)

    def test_prior_must_be_positive(self):
        with pytest.raises(ValueError):
            PriorSpec(0.0)


class TestMonteCarloKL:
    def test_unit_case(self):
        est, se = mc_kl(_param(np.array([1.0]), 1.0), PriorSpec(1.0), 100000, seed=0)
        assert abs(est - 0.5) < 3 * se

    def test_matches_closed_form_random_cases(self):
        rng = np.random.default_rng(20)
        for case in range(10):
            mu = rng.normal(size=3)
            sigma = rng.uniform(0.1, 1.5, size=3)
            sp = rng.uniform(0.1, 1.5)
            p = VariationalParam(Tensor(mu), Tensor(np.log(np.expm1(sigma))))
            est, se = mc_kl(p, PriorSpec(sp), 20000, seed=case)
            want = _closed_form(mu, sigma, sp)
            assert abs(est - want) < 3 * se, f"case {case}: {est} vs {want} (se {se})"

    def test_deterministic_given_seed(self):
        p = _param(np.array([0.5, 0.5]), 0.3)
        a = mc_kl(p, PriorSpec(0.15), 5000, seed=7)
        b = mc_kl(p, PriorSpec(0.15), 5000, seed=7)
        assert a == b

    def test_stderr_shrinks_with_samples(self):
        p = _param(np.array([0.5]), 0.3)
        _, se_small = mc_kl(p, PriorSpec(0.15), 1000, seed=1)
        _, se_big = mc_kl(p, PriorSpec(0.15), 100000, seed=1)
        assert se_big < se_small

    def test_sample_count_validated(self):
        with pytest.raises(ValueError):
            mc_kl(_param(np.array([0.0]), 0.1), PriorSpec(0.15), 0, seed=0)


class TestCrossEntropy:
    def test_uniform_logits(self):
        ce = cross_entropy(Tensor([[0.0, 0.0]]), np.array([0]))
        assert abs(ce.item() - math.log(2.0)) < 1e-12

    def test_gradient_value(self):
        x = Tensor([[0.0, 0.0]], requires_grad=True)
        g = backward(cross_entropy(x, np.array([0])))[x]
        np.testing.assert_allclose(g, [[-0.5, 0.5]], atol=1e-12)

    def test_batch_mean(self):
        logits = Tensor([[2.0, 0.0], [0.0, 2.0]])
        ce = cross_entropy(logits, np.array([0, 1])).item()
        want = -math.log(math.exp(2) / (math.exp(2) + 1))
        assert abs(ce - want) < 1e-12

    def test_extreme_logits_stable(self):
        ce = cross_entropy(Tensor([[1000.0, -1000.0]]), np.array([0]))
        assert np.isfinite(ce.item())

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="label"):
            cross_entropy(Tensor([[0.0, 0.0]]), np.array([2]))


class TestElbo:
    def test_known_arithmetic(self):
        # logits chosen so the data term is exactly softplus(z) = 1.2
        z = math.log(math.exp(1.2) - 1.0)
        logits = Tensor([[0.0, z]])
        loss = elbo_loss(logits, np.array([0]), kl_total=3.0, beta=0.1)
        assert abs(loss.item() - 1.5) < 1e-9

    def test_beta_zero_is_pure_data_term(self):
        logits = Tensor([[0.3, -0.2]])
        labels = np.array([1])
        a = elbo_loss(logits, labels, kl_total=10.0, beta=0.0).item()
        b = cross_entropy(logits, labels).item()
        assert abs(a - b) < 1e-15

    def test_composition(self):
        rng = np.random.default_rng(4)
        logits = Tensor(rng.normal(size=(5, 3)))
        labels = np.array([0, 1, 2, 1, 0])
        kl = 2.25
        got = elbo_loss(logits, labels, kl, beta=0.7).item()
        want = cross_entropy(logits, labels).item() + 0.7 * kl
        assert abs(got - want) < 1e-12

    def test_gradient_reaches_kl_source(self):
        p = _param(np.array([0.5]), 0.3)
        kl = kl_gaussian(p, PriorSpec(0.15))
        logits = Tensor([[0.1, -0.1]], requires_grad=True)
        grads = backward(elbo_loss(logits, np.array([0]), kl, beta=0.1))
        assert p.mu in grads and logits in grads

    def test_negative_beta_rejected(self):
        with pytest.raises(ValueError):
            elbo_loss(Tensor([[0.0, 0.0]]), np.array([0]), 1.0, beta=-0.1)
