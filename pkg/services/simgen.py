"""
Simulation data-generating process

Three correlated confounders (X3 dichotomized at zero), logistic treatment
assignment, a binary outcome whose conditional log-odds ratio theta_c is
calibrated to a target marginal relative risk, and MAR missingness on X1
and X3 driven by Z, X2 and (optionally) Y.
"""
from dataclasses import asdict, dataclass, replace
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional, Tuple

import numpy as np
import orjson
from scipy.special import expit

from config import Config
from services.mice import ColumnKind, Dataset
from services.numstat import RandomSource, RngStream, as_generator, mvn_sample
from utils.errors import InputError, ParameterError
from utils.logger import get_logger
from utils.validators import validate_scenario

logger = get_logger(__name__)

COVARIATES = ('X1', 'X2', 'X3')
KINDS = {'X1': ColumnKind.CONTINUOUS, 'X2': ColumnKind.CONTINUOUS, 'X3': ColumnKind.BINARY}

TREATMENT_COEF = (-1.15, 0.7, 0.6, 0.6)
OUTCOME_COEF = (-1.5, 0.5, 0.5, 0.3)

# Published calibration for the 30% missingness design
PUBLISHED_THETA_C = {(0.3, 2.0): 1.221, (0.6, 2.0): 1.289}
PUBLISHED_GAMMA_0 = {0.0: -1.5, -0.4: -1.3}
BASE_MISSING_RATE = 0.30
YZ_MCAR_RATE = 0.30

# Stream ids reserved for calibration so they never collide with replication indices
CALIBRATION_STREAM = 2 ** 40
TRUTH_STREAM = 2 ** 40 + 1
GAMMA0_STREAM = 2 ** 40 + 2

_CHUNK = 1_000_000


class Variant(Enum):
    BASE = 'BASE'
    MISS_YZ_MCAR = 'MISS_YZ_MCAR'
    RATE_10 = 'RATE_10'
    RATE_60 = 'RATE_60'
    N_500 = 'N_500'
    M_5 = 'M_5'
    M_20 = 'M_20'


_VARIANT_OVERRIDES = {
    Variant.RATE_10: {'missing_rate_target': 0.10},
    Variant.RATE_60: {'missing_rate_target': 0.60},
    Variant.N_500: {'n': 500},
    Variant.M_5: {'M': 5},
    Variant.M_20: {'M': 20},
}


@dataclass(frozen=True)
class ScenarioConfig:
    """
    Generator parameters for one simulation scenario

    ``theta_c`` and ``gamma_0`` may be left unset; ``resolved()`` fills them
    from the published calibration or by Monte Carlo solving.
    """

    rho: float
    target_rr: float
    gamma_y: float
    include_outcome: bool = True
    n: int = 2000
    theta_c: Optional[float] = None
    gamma_0: Optional[float] = None
    missing_rate_target: float = BASE_MISSING_RATE
    M: int = Config.M
    reps: int = 500
    seed: int = Config.SEED
    variant: Variant = Variant.BASE
    number: Optional[int] = None
    name: Optional[str] = None

    def __post_init__(self):
        if not 0.0 <= self.rho < 1.0:
            raise ParameterError(f"rho must lie in [0, 1), got {self.rho}")
        if self.target_rr < 1.0:
            raise ParameterError(f"target_rr must be at least 1, got {self.target_rr}")
        if not 0.0 < self.missing_rate_target < 1.0:
            raise ParameterError(f"missing_rate_target must lie in (0, 1), got {self.missing_rate_target}")
        if self.M < 2 or self.n < 10 or self.reps < 1:
            raise ParameterError(f"invalid sizes n={self.n}, M={self.M}, reps={self.reps}")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        base = f"scenario{self.number}" if self.number else \
            f"rr{self.target_rr:g}_rho{self.rho:g}_gy{self.gamma_y:g}"
        return base if self.variant is Variant.BASE else f"{base}_{self.variant.value.lower()}"

    def with_variant(self, variant: Variant) -> 'ScenarioConfig':
        """Apply a sensitivity variant on top of this configuration"""
        changes = dict(_VARIANT_OVERRIDES.get(variant, {}))
        if 'missing_rate_target' in changes:
            changes['gamma_0'] = None
        return replace(self, variant=variant, **changes)

    def resolved(self) -> 'ScenarioConfig':
        """Fill theta_c and gamma_0 (published values first, Monte Carlo otherwise)"""
        theta_c = self.theta_c
        if theta_c is None:
            theta_c = resolve_theta_c(self.rho, self.target_rr, self.seed)
        gamma_0 = self.gamma_0
        if gamma_0 is None:
            gamma_0 = resolve_gamma0(self.missing_rate_target, self.gamma_y, self.rho, theta_c, self.seed)
        return replace(self, theta_c=float(theta_c), gamma_0=float(gamma_0))

    def to_dict(self) -> dict:
        data = asdict(self)
        data['variant'] = self.variant.value
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'ScenarioConfig':
        validate_scenario(data)
        values = dict(data)
        variant = Variant(values.get('variant', Variant.BASE.value))
        # explicit keys win over the variant's defaults
        for key, value in _VARIANT_OVERRIDES.get(variant, {}).items():
            values.setdefault(key, value)
        values['variant'] = variant
        for key in ('rho', 'target_rr', 'gamma_y', 'missing_rate_target'):
            if key in values:
                values[key] = float(values[key])
        return cls(**values)


@dataclass(frozen=True)
class ScenarioTruth:
    log_rr: float
    log_or: float
    rd: float
    mu1: float
    mu0: float

    @classmethod
    def null(cls, mu0: float) -> 'ScenarioTruth':
        return cls(0.0, 0.0, 0.0, mu0, mu0)


def load_scenario(path) -> ScenarioConfig:
    """Read a scenario JSON document"""
    path = Path(path)
    try:
        data = orjson.loads(path.read_bytes())
    except FileNotFoundError as e:
        raise InputError(f"Scenario file not found: {path}") from e
    except orjson.JSONDecodeError as e:
        raise InputError(f"Scenario file {path} is not valid JSON: {e}") from e
    return ScenarioConfig.from_dict(data)


def dump_scenario(config: ScenarioConfig, path) -> None:
    Path(path).write_bytes(orjson.dumps(config.to_dict(), option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS))


# --- catalogue ---

def scenario(number: int, variant: Variant = Variant.BASE, **overrides) -> ScenarioConfig:
    """
    The sixteen factorial scenarios

    1-8 keep the outcome in the imputation model, 9-16 repeat them without it.
    Within each block of four (rho 0.3 then 0.6): RR=1 with Y predicting
    missingness, RR=1 without, RR=2 with, RR=2 without.
    """
    if not 1 <= number <= 16:
        raise ParameterError(f"scenario number must lie in 1..16, got {number}")
    index = (number - 1) % 8
    rho = 0.3 if index < 4 else 0.6
    target_rr = 1.0 if index % 4 < 2 else 2.0
    gamma_y = -0.4 if index % 2 == 0 else 0.0
    config = ScenarioConfig(rho=rho, target_rr=target_rr, gamma_y=gamma_y,
                            include_outcome=number <= 8, number=number, **overrides)
    return config.with_variant(variant) if variant is not Variant.BASE else config


# --- generation ---

def _covariates(gen: np.random.Generator, n: int, rho: float) -> np.ndarray:
    x = mvn_sample(gen, n, rho)
    x[:, 2] = (x[:, 2] > 0).astype(float)
    return x


def _linear(coef, x: np.ndarray) -> np.ndarray:
    return coef[0] + x @ np.asarray(coef[1:])


def generate(config: ScenarioConfig, rng: RandomSource) -> Tuple[Dataset, Dataset]:
    """
    Draw one replication

    Returns:
        (pre-deletion dataset, post-deletion dataset); the two agree on every
        observed cell
    """
    if config.theta_c is None or config.gamma_0 is None:
        config = config.resolved()
    gen = as_generator(rng)
    n = config.n

    x = _covariates(gen, n, config.rho)
    z = (gen.random(n) < expit(_linear(TREATMENT_COEF, x))).astype(float)
    y = (gen.random(n) < expit(_linear(OUTCOME_COEF, x) + config.theta_c * z)).astype(float)

    miss_logit = config.gamma_0 + z + x[:, 1] + config.gamma_y * y
    r1 = gen.random(n) < expit(miss_logit)
    r3 = gen.random(n) < expit(miss_logit)

    covariates = {name: x[:, j] for j, name in enumerate(COVARIATES)}
    full = Dataset.from_arrays(y, z, covariates, kinds=KINDS)

    observed = full.frame.copy()
    observed.loc[r1, 'X1'] = np.nan
    observed.loc[r3, 'X3'] = np.nan
    if config.variant is Variant.MISS_YZ_MCAR:
        observed.loc[gen.random(n) < YZ_MCAR_RATE, full.outcome] = np.nan
        observed.loc[gen.random(n) < YZ_MCAR_RATE, full.treatment] = np.nan
    return full, full.with_frame(observed)


# --- calibration ---

def _outcome_linear_predictor(rho: float, n_mc: int, rng: RandomSource) -> np.ndarray:
    """Outcome linear predictor without the treatment term over n_mc covariate draws"""
    gen = as_generator(rng)
    parts = []
    remaining = int(n_mc)
    while remaining > 0:
        size = min(_CHUNK, remaining)
        parts.append(_linear(OUTCOME_COEF, _covariates(gen, size, rho)))
        remaining -= size
    return np.concatenate(parts)


def _bisect(func: Callable[[float], float], target: float, lo: float, hi: float,
            tol: float, label: str, max_iter: int = 200) -> float:
    """Root of an increasing function on [lo, hi]; stops once |func - target| < tol"""
    f_lo, f_hi = func(lo) - target, func(hi) - target
    if f_lo > 0 or f_hi < 0:
        raise ParameterError(f"{label}: target {target} not bracketed by [{lo}, {hi}]")
    mid = (lo + hi) / 2.0
    for _ in range(max_iter):
        mid = (lo + hi) / 2.0
        gap = func(mid) - target
        if abs(gap) < tol:
            break
        if gap < 0:
            lo = mid
        else:
            hi = mid
    return mid


def calibrate_theta_c(rho: float, target_rr: float, rng: RandomSource,
                      n_mc: int = None, tol: float = 1e-3) -> float:
    """
    Conditional log-odds ratio giving the target marginal relative risk

    Marginal RR(theta) = E[expit(lin + theta)] / E[expit(lin)] over the
    simulated covariate distribution; solved by bisection on [0, 10].

    Raises:
        ParameterError: target below 1 or not reachable in the bracket
    """
    if target_rr < 1.0:
        raise ParameterError(f"target_rr must be at least 1, got {target_rr}")
    if target_rr == 1.0:
        return 0.0
    n_mc = Config.CALIBRATION_DRAWS if n_mc is None else n_mc
    lin = _outcome_linear_predictor(rho, n_mc, rng)
    baseline = expit(lin).mean()

    def marginal_rr(theta: float) -> float:
        return float(expit(lin + theta).mean() / baseline)

    theta_c = _bisect(marginal_rr, target_rr, 0.0, 10.0, tol, 'theta_c calibration')
    logger.info(f"Calibrated theta_c={theta_c:.4f} for rho={rho}, RR={target_rr} ({n_mc} draws)")
    return theta_c


def truth_for(config: ScenarioConfig, n_mc: int = None) -> ScenarioTruth:
    """Marginal log RR, log OR and RD for a scenario"""
    n_mc = Config.CALIBRATION_DRAWS if n_mc is None else n_mc
    theta_c = config.theta_c if config.theta_c is not None else \
        resolve_theta_c(config.rho, config.target_rr, config.seed)
    return _monte_carlo_truth(float(config.rho), float(theta_c), int(n_mc), int(config.seed))


@lru_cache(maxsize=64)
def _monte_carlo_truth(rho: float, theta_c: float, n_mc: int, seed: int) -> ScenarioTruth:
    lin = _outcome_linear_predictor(rho, n_mc, RngStream(seed, TRUTH_STREAM))
    mu0 = float(expit(lin).mean())
    if theta_c == 0.0:
        return ScenarioTruth.null(mu0)
    mu1 = float(expit(lin + theta_c).mean())
    return ScenarioTruth(
        log_rr=float(np.log(mu1 / mu0)),
        log_or=float(np.log(mu1 / (1 - mu1)) - np.log(mu0 / (1 - mu0))),
        rd=mu1 - mu0, mu1=mu1, mu0=mu0,
    )


def solve_gamma0(rate_target: float, gamma_y: float, rho: float, theta_c: float,
                 rng: RandomSource, n_mc: int = None, tol: float = 0.002) -> float:
    """
    Missingness intercept giving the target expected missing rate

    The rate is averaged over a Monte Carlo population of (X, Z, Y) and is
    increasing in gamma_0, so bisection on [-20, 20] applies.

    Raises:
        ParameterError: rate outside (0, 1) or not bracketed
    """
    if not 0.0 < rate_target < 1.0:
        raise ParameterError(f"missing rate must lie in (0, 1), got {rate_target}")
    n_mc = Config.GAMMA0_DRAWS if n_mc is None else n_mc
    gen = as_generator(rng)
    x = _covariates(gen, n_mc, rho)
    z = (gen.random(n_mc) < expit(_linear(TREATMENT_COEF, x))).astype(float)
    y = (gen.random(n_mc) < expit(_linear(OUTCOME_COEF, x) + theta_c * z)).astype(float)
    offset = z + x[:, 1] + gamma_y * y

    def missing_rate(gamma_0: float) -> float:
        return float(expit(gamma_0 + offset).mean())

    return _bisect(missing_rate, rate_target, -20.0, 20.0, tol, 'gamma_0 solve')


@lru_cache(maxsize=32)
def resolve_theta_c(rho: float, target_rr: float, seed: int) -> float:
    published = PUBLISHED_THETA_C.get((round(rho, 6), round(target_rr, 6)))
    if target_rr == 1.0:
        return 0.0
    if published is not None:
        return published
    return calibrate_theta_c(rho, target_rr, RngStream(seed, CALIBRATION_STREAM))


@lru_cache(maxsize=64)
def resolve_gamma0(rate_target: float, gamma_y: float, rho: float, theta_c: float, seed: int) -> float:
    if abs(rate_target - BASE_MISSING_RATE) < 1e-12 and gamma_y in PUBLISHED_GAMMA_0:
        return PUBLISHED_GAMMA_0[gamma_y]
    gamma_0 = solve_gamma0(rate_target, gamma_y, rho, theta_c, RngStream(seed, GAMMA0_STREAM))
    logger.info(f"Solved gamma_0={gamma_0:.4f} for missing rate {rate_target}, gamma_y={gamma_y}")
    return gamma_0
