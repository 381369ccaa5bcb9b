"""
Propensity-score estimation, IPTW marginal means, effect measures and
their variance estimators (uncorrected, PS-corrected, and the MI-pooled
parameter correction used for pooled propensity scores).
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from config import Config
from services.numstat import GlmFit, add_intercept, fit_logistic
from utils.errors import DomainError, EstimationError, ParameterError
from utils.logger import get_logger

logger = get_logger(__name__)

Z_CRIT = 1.96


class EffectMeasure(Enum):
    LOG_RR = 'RR'
    LOG_OR = 'OR'
    RD = 'RD'


class VarianceFlavor(Enum):
    UNCORRECTED = 'uncorrected'
    PS_CORRECTED = 'ps_corrected'
    PS_PLUS_MI = 'ps_plus_mi'
    # MIte pooling: Rubin total over per-imputation uncorrected variances, and the
    # within-imputation mean of the PS-corrected variances
    RUBIN_UNCORRECTED = 'rubin_uncorrected'
    WITHIN_PS_CORRECTED = 'within_ps_corrected'


MEASURES: Tuple[EffectMeasure, ...] = (EffectMeasure.LOG_RR, EffectMeasure.LOG_OR, EffectMeasure.RD)


@dataclass
class FittedPS:
    """Fitted propensity model; design keeps the rows that entered the fit"""

    alpha: np.ndarray
    alpha_cov: np.ndarray
    scores: np.ndarray
    design: np.ndarray
    fit: Optional[GlmFit] = field(default=None, repr=False)

    def __post_init__(self):
        if self.alpha_cov.shape != (self.alpha.size, self.alpha.size):
            raise ParameterError("alpha_cov must be conformable with alpha")


@dataclass
class MarginalMeans:
    mu1: float
    mu0: float
    warnings: List[str] = field(default_factory=list)


@dataclass
class EffectEstimate:
    """One contrast with its headline variance and every other flavor computed"""

    measure: EffectMeasure
    estimate: float
    variance: float
    ci_low: float
    ci_high: float
    mu1: float
    mu0: float
    variance_flavor: VarianceFlavor
    other_variances: Dict[VarianceFlavor, float] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    @classmethod
    def build(cls, measure: EffectMeasure, estimate: float, variance: float,
              mu1: float, mu0: float, flavor: VarianceFlavor,
              other_variances: Dict[VarianceFlavor, float] = None,
              warnings: List[str] = None) -> 'EffectEstimate':
        if variance < 0:
            raise ParameterError(f"variance must be non-negative, got {variance}")
        half = Z_CRIT * np.sqrt(variance)
        variances = dict(other_variances or {})
        variances[flavor] = variance
        return cls(measure=measure, estimate=float(estimate), variance=float(variance),
                   ci_low=float(estimate - half), ci_high=float(estimate + half),
                   mu1=float(mu1), mu0=float(mu0), variance_flavor=flavor,
                   other_variances=variances, warnings=list(warnings or []))

    def covers(self, truth: float) -> bool:
        return self.ci_low <= truth <= self.ci_high


@dataclass
class MIVarianceInputs:
    """Within (W) and between (B) covariance of the PS parameters over M fits"""

    W: np.ndarray
    B: np.ndarray
    M: int

    @classmethod
    def from_fits(cls, fits: Sequence[FittedPS]) -> 'MIVarianceInputs':
        if len(fits) < 2:
            raise ParameterError("MI variance inputs need at least two imputations")
        alphas = np.vstack([f.alpha for f in fits])
        W = np.mean([f.alpha_cov for f in fits], axis=0)
        B = np.atleast_2d(np.cov(alphas, rowvar=False, ddof=1))
        return cls(W=W, B=B, M=len(fits))


# --- propensity score ---

def estimate_ps(covariates: np.ndarray, z: np.ndarray, **fit_kwargs) -> FittedPS:
    """
    Fit the logistic propensity model on a complete covariate table

    Args:
        covariates: n x p matrix without intercept (p may be 0)
        z: binary treatment vector

    Raises:
        EstimationError: one treatment arm is empty
        ParameterError, SeparationError: propagated from the logistic fit
    """
    z = np.asarray(z, dtype=float)
    covariates = np.asarray(covariates, dtype=float).reshape(z.size, -1)
    if np.isnan(covariates).any():
        raise ParameterError("propensity covariates contain missing cells")
    _check_arms(z)

    design = add_intercept(covariates)
    fit = fit_logistic(design, z, **fit_kwargs)
    scores = expit(design @ fit.coefficients)
    return FittedPS(alpha=fit.coefficients, alpha_cov=fit.covariance,
                    scores=scores, design=design, fit=fit)


def scores_from(design: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    return expit(np.asarray(design, dtype=float) @ np.asarray(alpha, dtype=float))


def _check_arms(z: np.ndarray) -> None:
    treated = int(np.sum(z == 1))
    if treated == 0 or treated == z.size:
        raise EstimationError(f"both treatment arms must be non-empty (treated={treated}, n={z.size})")


def _prepare(y, z, scores, clip: Optional[float] = None):
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    scores = np.asarray(scores, dtype=float)
    if not (y.shape == z.shape == scores.shape):
        raise ParameterError(f"y, z and scores must have equal length ({y.shape}, {z.shape}, {scores.shape})")
    _check_arms(z)
    if clip is not None:
        scores = np.clip(scores, clip, 1.0 - clip)
    if np.any(scores <= 0.0) or np.any(scores >= 1.0):
        raise EstimationError("propensity scores must lie strictly inside (0, 1)")
    return y, z, scores


def iptw_weights(z: np.ndarray, scores: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    scores = np.asarray(scores, dtype=float)
    return z / scores + (1.0 - z) / (1.0 - scores)


def iptw_means(y: np.ndarray, z: np.ndarray, scores: np.ndarray,
               clip: Optional[float] = None) -> MarginalMeans:
    """
    Ratio-of-sums IPTW marginal means among treated (mu1) and untreated (mu0)

    Args:
        clip: optional truncation, scores clipped to [clip, 1 - clip]; off by default
    """
    y, z, scores = _prepare(y, z, scores, clip)
    notes = []
    extreme = Config.EXTREME_SCORE
    n_extreme = int(np.sum((scores < extreme) | (scores > 1.0 - extreme)))
    if n_extreme:
        msg = f"{n_extreme} extreme propensity scores (outside [{extreme:g}, 1-{extreme:g}])"
        logger.warning(msg)
        notes.append(msg)

    w1 = z / scores
    w0 = (1.0 - z) / (1.0 - scores)
    mu1 = float(np.sum(w1 * y) / np.sum(w1))
    mu0 = float(np.sum(w0 * y) / np.sum(w0))
    return MarginalMeans(mu1=mu1, mu0=mu0, warnings=notes)


def effect(mu1: float, mu0: float, measure: EffectMeasure) -> float:
    """Contrast of the marginal means on the estimate scale (log for RR and OR)"""
    _check_domain(mu1, mu0, measure)
    if measure is EffectMeasure.RD:
        return float(mu1 - mu0)
    if measure is EffectMeasure.LOG_RR:
        return float(np.log(mu1) - np.log(mu0))
    return float(np.log(mu1 / (1.0 - mu1)) - np.log(mu0 / (1.0 - mu0)))


def _check_domain(mu1: float, mu0: float, measure: EffectMeasure) -> None:
    if measure is EffectMeasure.RD:
        return
    for label, mu in (('mu1', mu1), ('mu0', mu0)):
        if not 0.0 < mu < 1.0:
            raise DomainError(f"{measure.name} needs {label} in (0, 1), got {mu}")


def k_factors(mu1: float, mu0: float, measure: EffectMeasure) -> Tuple[float, float]:
    """Derivatives of the measure's link at (mu1, mu0)"""
    _check_domain(mu1, mu0, measure)
    if measure is EffectMeasure.RD:
        return 1.0, 1.0
    if measure is EffectMeasure.LOG_RR:
        return 1.0 / mu1, 1.0 / mu0
    return 1.0 / (mu1 * (1.0 - mu1)), 1.0 / (mu0 * (1.0 - mu0))


def var_uncorrected(y, z, scores, mu1: float, mu0: float, measure: EffectMeasure) -> float:
    """
    Large-sample variance treating the scores as known.

    With S1 = sum(Z/e) and S0 = sum((1-Z)/(1-e)) (that is n times the average
    weight per arm):
        V_un = K1^2/S1^2 sum Z (Y-mu1)^2 / e^2 + K0^2/S0^2 sum (1-Z)(Y-mu0)^2/(1-e)^2
    """
    y, z, scores = _prepare(y, z, scores)
    k1, k0 = k_factors(mu1, mu0, measure)
    s1 = np.sum(z / scores)
    s0 = np.sum((1.0 - z) / (1.0 - scores))
    treated = np.sum(z * (y - mu1) ** 2 / scores ** 2)
    control = np.sum((1.0 - z) * (y - mu0) ** 2 / (1.0 - scores) ** 2)
    return float(k1 ** 2 * treated / s1 ** 2 + k0 ** 2 * control / s0 ** 2)


def ps_gradient(y, z, design, scores, mu1: float, mu0: float, measure: EffectMeasure) -> np.ndarray:
    """
    Minus the derivative of the contrast with respect to the PS parameters:

        v = K1/S1 sum x (Y-mu1) Z (1-e)/e + K0/S0 sum x (Y-mu0)(1-Z) e/(1-e)
    """
    y, z, scores = _prepare(y, z, scores)
    design = np.asarray(design, dtype=float)
    if design.shape[0] != y.size:
        raise ParameterError(f"design has {design.shape[0]} rows, expected {y.size}")
    k1, k0 = k_factors(mu1, mu0, measure)
    s1 = np.sum(z / scores)
    s0 = np.sum((1.0 - z) / (1.0 - scores))
    treated = (y - mu1) * z * (1.0 - scores) / scores
    control = (y - mu0) * (1.0 - z) * scores / (1.0 - scores)
    return k1 / s1 * (design.T @ treated) + k0 / s0 * (design.T @ control)


def _clamped(value: float, label: str, notes: Optional[list]) -> float:
    if value < 0.0:
        msg = f"{label} variance {value:.3g} negative after correction; clamped to 0"
        logger.warning(msg)
        if notes is not None:
            notes.append(msg)
        return 0.0
    return float(value)


def _conformable(matrix: np.ndarray, k: int, label: str) -> np.ndarray:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if matrix.shape != (k, k):
        raise ParameterError(f"{label} has shape {matrix.shape}, expected ({k}, {k})")
    return matrix


def var_ps_corrected(y, z, design, scores, alpha_cov, mu1: float, mu0: float,
                     measure: EffectMeasure, notes: Optional[list] = None) -> float:
    """V_PS = V_un - v' C_alpha v, clamped at zero"""
    v = ps_gradient(y, z, design, scores, mu1, mu0, measure)
    cov = _conformable(alpha_cov, v.size, 'alpha_cov')
    v_un = var_uncorrected(y, z, scores, mu1, mu0, measure)
    return _clamped(v_un - float(v @ cov @ v), 'PS-corrected', notes)


def var_mipar(y, z, xbar_design, scores, W, B, M: int, mu1: float, mu0: float,
              measure: EffectMeasure, notes: Optional[list] = None) -> float:
    """
    Variance for pooled-parameter (and pooled-score) estimators:

        V = V_un - v' {W - (1 + 1/M) B} v

    evaluated at the averaged covariates and the pooled scores. The remainder
    involving the unobserved full data is not estimated.
    """
    if M < 2:
        raise ParameterError(f"M must be at least 2, got {M}")
    v = ps_gradient(y, z, xbar_design, scores, mu1, mu0, measure)
    W = _conformable(W, v.size, 'W')
    B = _conformable(B, v.size, 'B')
    v_un = var_uncorrected(y, z, scores, mu1, mu0, measure)
    middle = W - (1.0 + 1.0 / M) * B
    return _clamped(v_un - float(v @ middle @ v), 'MI-corrected', notes)


def estimate_all(y, z, scores, measures: Sequence[EffectMeasure] = MEASURES,
                 clip: Optional[float] = None):
    """Marginal means once, then every requested contrast from the same pair"""
    means = iptw_means(y, z, scores, clip=clip)
    return means, {m: effect(means.mu1, means.mu0, m) for m in measures}
