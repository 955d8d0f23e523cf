import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corrvae.distributions import (DiagGaussian, importance_log_weights, kl_to_standard, log_prob,
                                   pairwise_log_density, reparameterize, total_correlation_terms)
from corrvae.numcore import Rng, ShapeError
from helpers import check_grad

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


class TestReparameterize:
    def test_zero_noise_gives_mean(self):
        g = DiagGaussian(np.array([1.0, -2.0]), np.array([0.3, -0.4]))
        np.testing.assert_array_equal(reparameterize(g, np.zeros(2)).data, [1.0, -2.0])

    def test_unit_noise(self):
        g = DiagGaussian(np.zeros(1), np.zeros(1))
        assert reparameterize(g, np.ones(1)).item() == 1.0

    def test_monte_carlo_moments(self):
        n = 65536
        g = DiagGaussian(np.full(n, 2.0), np.full(n, math.log(4.0)))
        s = reparameterize(g, Rng(3).normal(n)).data
        assert abs(s.mean() - 2.0) < 0.05
        assert abs(s.var() - 4.0) < 0.1

    def test_shape_checks(self):
        with pytest.raises(ShapeError):
            DiagGaussian(np.zeros(2), np.zeros(3))
        with pytest.raises(ShapeError):
            reparameterize(DiagGaussian(np.zeros(2), np.zeros(2)), np.zeros(3))

    def test_gradient(self):
        eps = Rng(4).normal((3, 2))
        err = check_grad(lambda m, lv: reparameterize(DiagGaussian(m, lv), eps).sum(),
                         Rng(5).normal((3, 2)), Rng(6).normal((3, 2)))
        assert err < 1e-5


class TestKL:
    @pytest.mark.parametrize("mu,logvar,expected", [
        ([0.0], [0.0], 0.0),
        ([1.0], [0.0], 0.5),
        ([0.0], [1.0], (math.e - 2) / 2),
        ([1.0, 0.0], [0.0, 1.0], 0.5 + (math.e - 2) / 2),
    ])
    def test_closed_form(self, mu, logvar, expected):
        kl = kl_to_standard(DiagGaussian(np.array(mu), np.array(logvar))).item()
        assert kl == pytest.approx(expected, abs=1e-9)

    def test_batch_mean(self):
        g = DiagGaussian(np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]]))
        assert kl_to_standard(g).item() == pytest.approx((0.5 + (math.e - 2) / 2) / 2, abs=1e-12)

    @settings(max_examples=50)
    @given(st.floats(-3, 3), st.floats(-3, 3))
    def test_non_negative(self, mu, logvar):
        assert kl_to_standard(DiagGaussian(np.array([mu]), np.array([logvar]))).item() >= -1e-12

    def test_gradient(self):
        err = check_grad(lambda m, lv: kl_to_standard(DiagGaussian(m, lv)),
                         Rng(7).normal((4, 3)), Rng(8).normal((4, 3)))
        assert err < 1e-5


class TestLogProb:
    @pytest.mark.parametrize("x,expected", [(0.0, -HALF_LOG_2PI), (1.0, -HALF_LOG_2PI - 0.5)])
    def test_standard_normal(self, x, expected):
        g = DiagGaussian(np.zeros(1), np.zeros(1))
        assert log_prob(g, np.array([x])).item() == pytest.approx(expected, abs=1e-9)

    def test_values_match_constants(self):
        g = DiagGaussian(np.zeros(1), np.zeros(1))
        assert log_prob(g, np.zeros(1)).item() == pytest.approx(-0.918939, abs=1e-6)
        assert log_prob(g, np.ones(1)).item() == pytest.approx(-1.418939, abs=1e-6)

    def test_factorizes(self):
        mu, lv, x = Rng(9).normal(3), Rng(10).normal(3), Rng(11).normal(3)
        total = log_prob(DiagGaussian(mu, lv), x).item()
        parts = sum(log_prob(DiagGaussian(mu[i:i + 1], lv[i:i + 1]), x[i:i + 1]).item()
                    for i in range(3))
        assert total == pytest.approx(parts, abs=1e-12)

    def test_matches_closed_form_density(self):
        mu, lv, x = 0.7, math.log(2.5), -0.4
        var = 2.5
        expected = -0.5 * math.log(2 * math.pi * var) - (x - mu) ** 2 / (2 * var)
        got = log_prob(DiagGaussian(np.array([mu]), np.array([lv])), np.array([x])).item()
        assert got == pytest.approx(expected, abs=1e-12)

    def test_pairwise_diagonal_matches_log_prob(self):
        g = DiagGaussian(Rng(12).normal((5, 3)), Rng(13).normal((5, 3)))
        s = Rng(14).normal((5, 3))
        pair = pairwise_log_density(s, g).data.sum(axis=2)
        np.testing.assert_allclose(np.diag(pair), log_prob(g, s).data, atol=1e-12)


class TestTotalCorrelation:
    @staticmethod
    def _posteriors(mu, sigma):
        return DiagGaussian(mu, np.full_like(mu, 2 * math.log(sigma)))

    @pytest.mark.parametrize("b,n", [(2, 2), (8, 100), (64, 5000)])
    def test_weights_normalize(self, b, n):
        np.testing.assert_allclose(np.exp(importance_log_weights(b, n)).sum(axis=1), 1.0)

    def test_weight_errors(self):
        with pytest.raises(ValueError):
            importance_log_weights(1, 10)
        with pytest.raises(ValueError):
            importance_log_weights(10, 5)

    @pytest.mark.parametrize("spread", [0.0, 1.0])
    def test_factorized_posteriors_near_zero(self, spread):
        # unit-variance posteriors whose means are independent across coordinates
        rng = Rng(15)
        b = 2048
        wq = self._posteriors(spread * rng.normal((b, 4)), 1.0)
        zq = self._posteriors(spread * rng.normal((b, 2)), 1.0)
        w = reparameterize(wq, rng.normal((b, 4)))
        z = reparameterize(zq, rng.normal((b, 2)))
        tc_zw, tc_w = total_correlation_terms(w, z, wq, zq, dataset_size=b)
        assert abs(tc_w.item()) < 0.1
        assert abs(tc_zw.item()) < 0.1

    def test_standard_posteriors_exactly_zero(self):
        b = 64
        q = DiagGaussian(np.zeros((b, 3)), np.zeros((b, 3)))
        s = Rng(16).normal((b, 3))
        tc_zw, tc_w = total_correlation_terms(s, s[:, :2], q, DiagGaussian(np.zeros((b, 2)), np.zeros((b, 2))), 1000)
        assert abs(tc_w.item()) < 1e-12 and abs(tc_zw.item()) < 1e-12

    def test_duplicated_coordinate_detected(self):
        rng = Rng(17)
        b = 2048
        mu = rng.normal((b, 4))
        mu[:, 1] = mu[:, 0]
        wq = self._posteriors(mu, 0.3)
        eps = rng.normal((b, 4))
        eps[:, 1] = eps[:, 0]
        w = reparameterize(wq, eps)
        zq = self._posteriors(rng.normal((b, 2)), 0.3)
        z = reparameterize(zq, rng.normal((b, 2)))
        _, tc_w = total_correlation_terms(w, z, wq, zq, dataset_size=b)
        assert tc_w.item() > 1.0

    def test_batch_errors(self):
        g = DiagGaussian(np.zeros((1, 2)), np.zeros((1, 2)))
        with pytest.raises(ValueError):
            total_correlation_terms(np.zeros((1, 2)), np.zeros((1, 2)), g, g, 10)

    def test_gradient_of_both_terms(self):
        rng = Rng(18)
        b, n = 6, 50
        eps_w, eps_z = rng.normal((b, 3)), rng.normal((b, 2))

        def build(mw, lw, mz, lz):
            wq, zq = DiagGaussian(mw, lw), DiagGaussian(mz, lz)
            tc_zw, tc_w = total_correlation_terms(reparameterize(wq, eps_w), reparameterize(zq, eps_z),
                                                  wq, zq, n)
            return tc_zw + tc_w * 0.7

        err = check_grad(build, rng.normal((b, 3)), 0.3 * rng.normal((b, 3)),
                         rng.normal((b, 2)), 0.3 * rng.normal((b, 2)))
        assert err < 1e-5
