"""
Numerical foundation: seeded random streams, correlated Gaussian sampling and
GLM fitting (logistic IRLS, Bayesian normal linear regression) with parameter
draws for proper imputation.
"""
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.special import expit

from config import Config
from utils.errors import ConvergenceError, ParameterError, SeparationError
from utils.logger import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream identified by (seed, stream_id).

    ``path`` addresses sub-streams (imputation chain, retry, ...) so that every
    consumer inside a replication draws from its own independent sequence.
    """

    seed: int
    stream_id: int = 0
    path: Tuple[int, ...] = ()

    def child(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.path + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,) + self.path)
        return np.random.Generator(np.random.PCG64(seq))


RandomSource = Union[RngStream, np.random.Generator]


def as_generator(rng: RandomSource) -> np.random.Generator:
    """Accept a stream or an already running generator"""
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise ParameterError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")


# --- covariance helpers ---

def equicorrelation(rho: float, dim: int = 3) -> np.ndarray:
    """Unit-variance matrix with every off-diagonal entry equal to rho"""
    cov = np.full((dim, dim), float(rho))
    np.fill_diagonal(cov, 1.0)
    return cov


def cholesky(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; failure means the matrix is not positive definite"""
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ParameterError(f"covariance must be square, got shape {cov.shape}")
    if not np.allclose(cov, cov.T, atol=1e-12):
        raise ParameterError("covariance must be symmetric")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as e:
        raise ParameterError(f"covariance is not positive definite: {e}") from e


def psd_factor(cov: np.ndarray) -> np.ndarray:
    """Square-root factor F with F Fᵀ = cov.

    Uses Cholesky when possible; otherwise clips negative eigenvalues to zero
    (PSD repair), which also covers singular and all-zero matrices.
    """
    cov = np.asarray(cov, dtype=float)
    cov = (cov + cov.T) / 2.0
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        eigval, eigvec = np.linalg.eigh(cov)
        if eigval.min() < -1e-8 * max(1.0, abs(eigval).max()):
            logger.warning(f"Repairing indefinite covariance (min eigenvalue {eigval.min():.3g})")
        return eigvec * np.sqrt(np.clip(eigval, 0.0, None))


def mvn_sample(rng: RandomSource, n: int, rho: float) -> np.ndarray:
    """
    Draw n rows from N3(0, Sigma) with unit variances and pairwise correlation rho

    Raises:
        ParameterError: rho does not give a positive definite matrix
    """
    if not np.isfinite(rho):
        raise ParameterError(f"rho must be finite, got {rho}")
    if n < 0:
        raise ParameterError(f"n must be non-negative, got {n}")
    chol = cholesky(equicorrelation(rho, 3))
    gen = as_generator(rng)
    return gen.standard_normal((int(n), 3)) @ chol.T


def add_intercept(covariates: np.ndarray) -> np.ndarray:
    covariates = np.asarray(covariates, dtype=float)
    if covariates.ndim == 1:
        covariates = covariates[:, None]
    return np.column_stack([np.ones(covariates.shape[0]), covariates])


# --- GLM fitting ---

@dataclass
class GlmFit:
    """Result of a GLM fit (intercept first)"""

    coefficients: np.ndarray
    covariance: np.ndarray
    converged: bool
    iterations: int
    dispersion: Optional[float] = None
    loglik: Optional[float] = None
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.covariance.shape != (self.coefficients.size, self.coefficients.size):
            raise ParameterError("covariance dimension must match coefficient length")


def _check_design(design: np.ndarray, response: np.ndarray, min_rows: int) -> Tuple[np.ndarray, np.ndarray]:
    design = np.asarray(design, dtype=float)
    response = np.asarray(response, dtype=float)
    if design.ndim != 2:
        raise ParameterError(f"design must be a matrix, got shape {design.shape}")
    if response.shape != (design.shape[0],):
        raise ParameterError(f"response length {response.shape} does not match design rows {design.shape[0]}")
    if not (np.isfinite(design).all() and np.isfinite(response).all()):
        raise ParameterError("design and response must not contain missing or infinite values")
    n, k = design.shape
    if n < min_rows:
        raise ParameterError(f"need at least {min_rows} rows for {k} coefficients, got {n}")
    if np.linalg.matrix_rank(design) < k:
        raise ParameterError(f"design is rank deficient ({k} columns)")
    return design, response


def _logistic_loglik(design: np.ndarray, response: np.ndarray, beta: np.ndarray) -> float:
    eta = design @ beta
    return float(np.sum(response * eta - np.logaddexp(0.0, eta)))


def fit_logistic(design: np.ndarray, response: np.ndarray,
                 tol: float = None, max_iter: int = None,
                 separation_bound: float = None) -> GlmFit:
    """
    Maximum-likelihood logistic regression by iteratively reweighted least squares

    Args:
        design: n x (p+1) matrix, intercept column included
        response: binary vector of length n
        tol: convergence tolerance on the max-abs score
        max_iter: iteration cap; exceeding it returns a fit flagged converged=False
        separation_bound: any |coefficient| above this declares separation

    Returns:
        GlmFit with covariance equal to the inverse observed information at the MLE

    Raises:
        ParameterError: malformed or rank-deficient design
        SeparationError: coefficients diverge past the separation bound
    """
    tol = Config.IRLS_TOL if tol is None else tol
    max_iter = Config.IRLS_MAX_ITER if max_iter is None else max_iter
    bound = Config.SEPARATION_BOUND if separation_bound is None else separation_bound

    design, response = _check_design(design, response, min_rows=np.asarray(design).shape[1])
    if not np.isin(response, (0.0, 1.0)).all():
        raise ParameterError("logistic response must be binary (0/1)")

    beta = np.zeros(design.shape[1])
    loglik = _logistic_loglik(design, response, beta)
    history = [loglik]
    converged = False
    iteration = 0

    for iteration in range(1, max_iter + 1):
        mu = expit(design @ beta)
        score = design.T @ (response - mu)
        if np.max(np.abs(score)) < tol:
            converged = True
            iteration -= 1
            break

        weight = mu * (1.0 - mu)
        info = design.T @ (design * weight[:, None])
        try:
            step = linalg.solve(info, score, assume_a='pos')
        except (linalg.LinAlgError, ValueError):
            step = np.linalg.lstsq(info, score, rcond=None)[0]

        # step-halving keeps the log-likelihood non-decreasing
        candidate = beta + step
        new_loglik = _logistic_loglik(design, response, candidate)
        halvings = 0
        while new_loglik < loglik and halvings < 30:
            step = step / 2.0
            candidate = beta + step
            new_loglik = _logistic_loglik(design, response, candidate)
            halvings += 1

        if new_loglik < loglik:
            # no ascent direction left at double precision
            logger.debug(f"IRLS stalled at iteration {iteration}")
            break

        beta, loglik = candidate, new_loglik
        history.append(loglik)
        logger.debug(f"IRLS iteration {iteration}: loglik={loglik:.10g} halvings={halvings}")

        if np.max(np.abs(beta)) > bound:
            raise SeparationError(
                f"logistic coefficients exceed {bound:g} after {iteration} iterations (separation)"
            )

    mu = expit(design @ beta)
    if not converged:
        score = design.T @ (response - mu)
        converged = bool(np.max(np.abs(score)) < tol)
        if not converged:
            logger.warning(f"Logistic IRLS did not converge after {max_iter} iterations")

    info = design.T @ (design * (mu * (1.0 - mu))[:, None])
    covariance = _invert_information(info)
    return GlmFit(coefficients=beta, covariance=covariance, converged=converged,
                  iterations=iteration, loglik=loglik, history=history)


def _invert_information(info: np.ndarray) -> np.ndarray:
    try:
        factor = linalg.cho_factor(info)
        cov = linalg.cho_solve(factor, np.eye(info.shape[0]))
    except linalg.LinAlgError:
        cov = linalg.pinvh(info)
    return (cov + cov.T) / 2.0


def fit_linear(design: np.ndarray, response: np.ndarray) -> GlmFit:
    """Ordinary least squares with residual variance as dispersion"""
    design, response = _check_design(design, response, min_rows=np.asarray(design).shape[1] + 2)
    n, k = design.shape
    xtx_inv = _invert_information(design.T @ design)
    beta = xtx_inv @ (design.T @ response)
    resid = response - design @ beta
    sigma2 = float(resid @ resid) / (n - k)
    return GlmFit(coefficients=beta, covariance=sigma2 * xtx_inv, converged=True,
                  iterations=1, dispersion=sigma2)


def fit_linear_bayes_draw(design: np.ndarray, response: np.ndarray,
                          rng: RandomSource) -> Tuple[np.ndarray, float]:
    """
    Posterior draw for normal linear regression under the non-informative prior

    sigma^2 ~ RSS / chi2(n - k); beta ~ N(beta_hat, sigma^2 (X'X)^-1)

    Returns:
        (coefficient draw, sigma draw)
    """
    design, response = _check_design(design, response, min_rows=np.asarray(design).shape[1] + 2)
    gen = as_generator(rng)
    n, k = design.shape

    xtx_inv = _invert_information(design.T @ design)
    beta_hat = xtx_inv @ (design.T @ response)
    resid = response - design @ beta_hat
    rss = float(resid @ resid)

    sigma2 = rss / gen.chisquare(n - k)
    sigma = float(np.sqrt(sigma2))
    beta = beta_hat + sigma * (psd_factor(xtx_inv) @ gen.standard_normal(k))
    return beta, sigma


def logistic_posterior_draw(fit: GlmFit, rng: RandomSource) -> np.ndarray:
    """Draw coefficients from the large-sample posterior N(alpha_hat, covariance)"""
    if not fit.converged:
        raise ConvergenceError("cannot draw from the posterior of a non-converged logistic fit")
    gen = as_generator(rng)
    z = gen.standard_normal(fit.coefficients.size)
    return fit.coefficients + psd_factor(fit.covariance) @ z
