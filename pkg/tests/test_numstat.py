import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit

from services.numstat import (GlmFit, RngStream, add_intercept, as_generator, cholesky,
                              equicorrelation, fit_linear, fit_linear_bayes_draw, fit_logistic,
                              logistic_posterior_draw, mvn_sample, psd_factor)
from utils.errors import ConvergenceError, ParameterError, SeparationError


def _newton_oracle(design, response, iterations=40):
    """Plain Newton-Raphson on the logistic log-likelihood"""
    beta = np.zeros(design.shape[1])
    for _ in range(iterations):
        p = 1 / (1 + np.exp(-design @ beta))
        hessian = design.T @ (design * (p * (1 - p))[:, None])
        beta = beta + np.linalg.solve(hessian, design.T @ (response - p))
    return beta


def _logistic_problem(seed, n=200, coef=(-0.3, 0.8, -0.5)):
    gen = np.random.default_rng(seed)
    design = add_intercept(gen.standard_normal((n, len(coef) - 1)))
    response = (gen.random(n) < expit(design @ np.asarray(coef))).astype(float)
    return design, response


class TestRngStream:

    def test_same_stream_reproduces(self):
        a = RngStream(7, 3).generator().random(10)
        b = RngStream(7, 3).generator().random(10)
        np.testing.assert_array_equal(a, b)

    def test_streams_differ(self):
        a = RngStream(7, 3).generator().random(10)
        b = RngStream(7, 4).generator().random(10)
        c = RngStream(7, 3).child(1).generator().random(10)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_as_generator_rejects_other_types(self):
        with pytest.raises(ParameterError):
            as_generator(42)


class TestCovariance:

    @pytest.mark.parametrize('rho', [0.0, 0.3, 0.6, 0.9])
    def test_cholesky_reproduces_matrix(self, rho):
        sigma = equicorrelation(rho)
        chol = cholesky(sigma)
        assert np.max(np.abs(chol @ chol.T - sigma)) < 1e-12

    def test_invalid_rho_is_parameter_error(self, stream):
        with pytest.raises(ParameterError):
            mvn_sample(stream, 10, -0.6)

    def test_psd_factor_repairs_singular(self):
        factor = psd_factor(np.ones((3, 3)))
        np.testing.assert_allclose(factor @ factor.T, np.ones((3, 3)), atol=1e-10)

    def test_sample_correlation(self, stream):
        x = mvn_sample(stream, 200_000, 0.3)
        corr = np.corrcoef(x, rowvar=False)
        assert abs(corr[0, 1] - 0.3) < 0.01
        assert abs(corr[0, 2] - 0.3) < 0.01
        np.testing.assert_allclose(x.var(axis=0), 1.0, atol=0.02)

    def test_independent_when_rho_zero(self, stream):
        corr = np.corrcoef(mvn_sample(stream, 200_000, 0.0), rowvar=False)
        assert np.max(np.abs(corr - np.eye(3))) < 0.01

    def test_dichotomized_correlation(self, stream):
        x = mvn_sample(stream, 200_000, 0.3)
        x3 = (x[:, 2] > 0).astype(float)
        assert abs(np.corrcoef(x[:, 0], x3)[0, 1] - 0.24) < 0.01


class TestFitLogistic:

    def test_balanced_table_gives_zero(self):
        design = add_intercept(np.array([0.0, 0.0, 1.0, 1.0]))
        fit = fit_logistic(design, np.array([0.0, 1.0, 0.0, 1.0]))
        assert fit.converged
        np.testing.assert_allclose(fit.coefficients, [0.0, 0.0], atol=1e-8)

    def test_separation(self):
        design = add_intercept(np.array([0.0, 1.0]))
        with pytest.raises(SeparationError):
            fit_logistic(design, np.array([0.0, 1.0]))

    def test_rank_deficient(self):
        gen = np.random.default_rng(0)
        x = gen.standard_normal(50)
        design = add_intercept(np.column_stack([x, 2 * x]))
        with pytest.raises(ParameterError):
            fit_logistic(design, (gen.random(50) < 0.5).astype(float))

    def test_non_binary_response(self):
        design, _ = _logistic_problem(1, n=20)
        with pytest.raises(ParameterError):
            fit_logistic(design, np.full(20, 0.5))

    @pytest.mark.parametrize('seed', range(100))
    def test_matches_newton_oracle(self, seed):
        design, response = _logistic_problem(seed)
        fit = fit_logistic(design, response)
        assert fit.converged
        np.testing.assert_allclose(fit.coefficients, _newton_oracle(design, response), atol=1e-6)

    def test_covariance_is_inverse_information(self):
        design, response = _logistic_problem(3)
        fit = fit_logistic(design, response)
        p = expit(design @ fit.coefficients)
        info = design.T @ (design * (p * (1 - p))[:, None])
        np.testing.assert_allclose(fit.covariance @ info, np.eye(3), atol=1e-8)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_loglik_non_decreasing(self, seed):
        design, response = _logistic_problem(seed, n=150, coef=(0.5, 1.5, -1.0))
        fit = fit_logistic(design, response)
        assert np.all(np.diff(fit.history) >= -1e-10)

    def test_iteration_cap_flags_non_convergence(self):
        design, response = _logistic_problem(4)
        fit = fit_logistic(design, response, max_iter=1)
        assert not fit.converged
        with pytest.raises(ConvergenceError):
            logistic_posterior_draw(fit, RngStream(1))

    def test_recovers_true_coefficients(self):
        design, response = _logistic_problem(11, n=20_000, coef=(-1.15, 0.7, 0.6))
        fit = fit_logistic(design, response)
        se = np.sqrt(np.diag(fit.covariance))
        assert np.all(np.abs(fit.coefficients - np.array([-1.15, 0.7, 0.6])) < 4 * se)


class TestLinearDraws:

    def test_zero_residual_limit(self, stream):
        gen = np.random.default_rng(5)
        design = add_intercept(gen.standard_normal((200, 2)))
        beta_true = np.array([1.0, -2.0, 0.5])
        beta, sigma = fit_linear_bayes_draw(design, design @ beta_true, stream)
        assert sigma < 1e-8
        np.testing.assert_allclose(beta, beta_true, atol=1e-6)

    def test_draws_centre_on_least_squares(self):
        gen = np.random.default_rng(6)
        design = add_intercept(gen.standard_normal((50, 2)))
        response = design @ np.array([0.5, 1.0, -1.0]) + gen.standard_normal(50)
        ols = fit_linear(design, response)
        draws_gen = RngStream(9).generator()
        draws = np.array([fit_linear_bayes_draw(design, response, draws_gen)[0] for _ in range(4000)])
        se = np.sqrt(np.diag(ols.covariance))
        assert np.all(np.abs(draws.mean(axis=0) - ols.coefficients) < 5 * se / np.sqrt(4000) * 1.2)

    def test_draw_variance_matches_least_squares(self):
        gen = np.random.default_rng(8)
        design = add_intercept(gen.standard_normal((200, 2)))
        response = design @ np.array([0.0, 1.0, 2.0]) + gen.standard_normal(200)
        ols = fit_linear(design, response)
        draws_gen = RngStream(10).generator()
        draws = np.array([fit_linear_bayes_draw(design, response, draws_gen)[0] for _ in range(10_000)])
        ratio = np.diag(np.cov(draws, rowvar=False)) / np.diag(ols.covariance)
        assert np.all(np.abs(ratio - 1) < 0.1)

    def test_too_few_rows(self, stream):
        design = add_intercept(np.arange(3.0))
        with pytest.raises(ParameterError):
            fit_linear_bayes_draw(design, np.arange(3.0), stream)


class TestLogisticPosteriorDraw:

    def test_zero_covariance_returns_mle(self, stream):
        fit = GlmFit(coefficients=np.array([0.2, -0.4]), covariance=np.zeros((2, 2)),
                     converged=True, iterations=3)
        np.testing.assert_array_equal(logistic_posterior_draw(fit, stream), fit.coefficients)

    def test_empirical_covariance(self):
        design, response = _logistic_problem(12, n=500)
        fit = fit_logistic(design, response)
        gen = RngStream(13).generator()
        draws = np.array([logistic_posterior_draw(fit, gen) for _ in range(10_000)])
        emp = np.cov(draws, rowvar=False)
        assert np.linalg.norm(emp - fit.covariance) / np.linalg.norm(fit.covariance) < 0.15

    def test_reproducible(self):
        design, response = _logistic_problem(14)
        fit = fit_logistic(design, response)
        a = logistic_posterior_draw(fit, RngStream(3, 1))
        b = logistic_posterior_draw(fit, RngStream(3, 1))
        np.testing.assert_array_equal(a, b)

    def test_glm_fit_dimension_check(self):
        with pytest.raises(ParameterError):
            GlmFit(coefficients=np.zeros(2), covariance=np.zeros((3, 3)), converged=True, iterations=1)
