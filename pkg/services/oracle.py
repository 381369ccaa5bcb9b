"""
Exact finite-state oracle for pooled propensity-score estimators

A four-binary-variable world (X, Z, Y, R) where R=1 marks a missing X. The
pooled-score and pooled-parameter rules are evaluated by exact enumeration
(rationals, with high-precision decimals only where an exponential enters),
showing that both are inconsistent while per-imputation weighting is not.
"""
from dataclasses import dataclass
from decimal import Decimal, localcontext
from fractions import Fraction
from itertools import product
from typing import Callable, Dict, List, Tuple, Union

from utils.errors import EstimationError, ParameterError

PRECISION = 50

Number = Union[Fraction, Decimal]
State = Tuple[int, int, int, int]          # (x, z, y, r)
ScoringRule = Callable[[State, 'DiscreteWorld'], Number]


def _decimal(value: Number) -> Decimal:
    if isinstance(value, Fraction):
        with localcontext() as ctx:
            ctx.prec = PRECISION
            return Decimal(value.numerator) / Decimal(value.denominator)
    return value


@dataclass(frozen=True)
class DiscreteWorld:
    """
    Joint law of (X, Z, Y, R) plus the true logistic PS parameters

    ``alpha`` holds the PS intercept and slope as multiples of ln 9
    (the true model is logit e(x) = ln 9 * (alpha[0] + alpha[1] x)).
    """

    probabilities: Dict[State, Fraction]
    alpha: Tuple[Fraction, Fraction] = (Fraction(-1), Fraction(2))

    def __post_init__(self):
        if any(p < 0 for p in self.probabilities.values()):
            raise ParameterError("state probabilities must be non-negative")
        total = sum(self.probabilities.values(), Fraction(0))
        if total != 1:
            raise ParameterError(f"state probabilities sum to {total}, not 1")

    def states(self) -> List[Tuple[State, Fraction]]:
        return sorted(self.probabilities.items())

    def true_ps(self, x: Number) -> Number:
        """expit(ln 9 (a0 + a1 x)) = 1 / (1 + 9^-(a0 + a1 x)); rational for integer exponents"""
        exponent = self.alpha[0] + self.alpha[1] * x
        if isinstance(exponent, Fraction) and exponent.denominator == 1:
            return Fraction(1) / (1 + Fraction(9) ** int(-exponent))
        with localcontext() as ctx:
            ctx.prec = PRECISION
            return Decimal(1) / (1 + Decimal(9) ** (-_decimal(exponent)))

    def observed_conditional_x(self, z: int, y: int) -> Fraction:
        """P(X=1 | Z=z, Y=y, R=0): the law an imputation model fitted on observed rows draws from"""
        mass = {0: Fraction(0), 1: Fraction(0)}
        for (x, zz, yy, r), p in self.probabilities.items():
            if zz == z and yy == y and r == 0:
                mass[x] += p
        total = mass[0] + mass[1]
        if total == 0:
            raise EstimationError(f"no observed rows with Z={z}, Y={y} to impute from")
        return mass[1] / total


def counterexample_world() -> DiscreteWorld:
    """
    X ~ Bern(1/2); P(Z=1|X) = 9/10 if X=1 else 1/10;
    Y ~ Bern(9/10) if X=Z=1 else Bern(1/10);
    X is missing with probability 9/10 when Z=1 and never when Z=0.
    """
    probs = {}
    for x, z, y, r in product((0, 1), repeat=4):
        px = Fraction(1, 2)
        pz1 = Fraction(9, 10) if x == 1 else Fraction(1, 10)
        pz = pz1 if z == 1 else 1 - pz1
        py1 = Fraction(9, 10) if (x == 1 and z == 1) else Fraction(1, 10)
        py = py1 if y == 1 else 1 - py1
        pr1 = Fraction(9, 10) if z == 1 else Fraction(0)
        pr = pr1 if r == 1 else 1 - pr1
        probs[(x, z, y, r)] = px * pz * py * pr
    return DiscreteWorld(probs)


# --- scoring rules ---

def true_ps_rule(state: State, world: DiscreteWorld) -> Number:
    """Score from the true X, as if nothing were missing"""
    return world.true_ps(state[0])


def pooled_score_rule(state: State, world: DiscreteWorld) -> Number:
    """Average of the per-imputation scores (infinitely many imputations)"""
    x, z, y, r = state
    if r == 0:
        return world.true_ps(x)
    p1 = world.observed_conditional_x(z, y)
    return p1 * world.true_ps(1) + (1 - p1) * world.true_ps(0)


def pooled_parameter_rule(state: State, world: DiscreteWorld) -> Number:
    """Score of the averaged imputed covariate under the pooled parameters"""
    x, z, y, r = state
    if r == 0:
        return world.true_ps(x)
    return world.true_ps(world.observed_conditional_x(z, y))


RULES: Dict[str, ScoringRule] = {
    'true': true_ps_rule,
    'pooled_score': pooled_score_rule,
    'pooled_parameter': pooled_parameter_rule,
}


def brute_force_iptw_expectation(world: DiscreteWorld, rule: ScoringRule,
                                 normalized: bool = False) -> Number:
    """
    Population analog of the treated IPTW mean: sum over states of P(s) Y Z / score(s)

    With ``normalized`` the sum is divided by sum P(s) Z / score(s), the
    population form of the ratio-of-sums estimator.

    Raises:
        EstimationError: no treated mass, or a treated state of positive
            probability has score zero (positivity violation)
    """
    numerator: Number = Fraction(0)
    denominator: Number = Fraction(0)
    with localcontext() as ctx:
        ctx.prec = PRECISION
        for state, p in world.states():
            x, z, y, r = state
            if z != 1 or p == 0:
                continue
            score = rule(state, world)
            if score <= 0:
                raise EstimationError(f"positivity violated: state {state} has score {score}")
            if isinstance(score, Decimal) or isinstance(numerator, Decimal):
                numerator, denominator = _decimal(numerator), _decimal(denominator)
                weight = _decimal(p) / _decimal(score)
            else:
                weight = p / score
            numerator += weight * y
            denominator += weight
        if denominator == 0:
            raise EstimationError("positivity violated: no treated mass in the world")
        return numerator / denominator if normalized else numerator


def mite_analog_expectation(world: DiscreteWorld) -> Fraction:
    """
    Per-imputation weighting: every missing state is split over its imputed
    X values (drawn from the observed conditional law) and each completed
    state is weighted by its own true score
    """
    total = Fraction(0)
    for (x, z, y, r), p in world.states():
        if z != 1 or p == 0:
            continue
        if r == 0:
            total += p * y / world.true_ps(x)
            continue
        p1 = world.observed_conditional_x(z, y)
        for x_imp, q in ((1, p1), (0, 1 - p1)):
            total += p * q * y / world.true_ps(x_imp)
    return total


@dataclass(frozen=True)
class CounterexampleResult:
    theta_true: Fraction
    e_expected_missing: Fraction
    mips_expectation: Fraction
    xbar: Fraction
    mipar_ps_at_xbar: Decimal
    mipar_expectation: Decimal

    def as_rows(self) -> List[Tuple[str, str]]:
        def fmt(value) -> str:
            return f"{float(value):.4f}"
        return [
            ('theta_true', fmt(self.theta_true)),
            ('e_expected_missing', fmt(self.e_expected_missing)),
            ('mips_expectation', fmt(self.mips_expectation)),
            ('mipar_ps_at_xbar', fmt(self.mipar_ps_at_xbar)),
            ('mipar_expectation', fmt(self.mipar_expectation)),
        ]


def counterexample() -> CounterexampleResult:
    """
    Closed-form quantities of the counter-example world

    Computed from the marginal laws directly rather than by state
    enumeration, so it cross-checks brute_force_iptw_expectation.
    """
    half, tenth, nine_tenths = Fraction(1, 2), Fraction(1, 10), Fraction(9, 10)
    e1, e0 = nine_tenths, tenth

    # E[Y^{z=1}] = P(X=1) 0.9 + P(X=0) 0.1
    theta_true = half * nine_tenths + half * tenth

    # treated with Y=1: joint masses by X
    m_x1 = half * e1 * nine_tenths
    m_x0 = half * e0 * tenth
    xbar = m_x1 / (m_x1 + m_x0)
    e_missing = xbar * e1 + (1 - xbar) * e0

    # treated with Y=0 only matter through Y=0, which drops out of the treated mean
    p_missing = nine_tenths
    observed_part = (m_x1 / e1 + m_x0 / e0) * (1 - p_missing)
    missing_mass = (m_x1 + m_x0) * p_missing
    mips = observed_part + missing_mass / e_missing

    world = counterexample_world()
    ps_at_xbar = world.true_ps(xbar)
    with localcontext() as ctx:
        ctx.prec = PRECISION
        mipar = _decimal(observed_part) + _decimal(missing_mass) / _decimal(ps_at_xbar)

    return CounterexampleResult(theta_true=theta_true, e_expected_missing=e_missing,
                                mips_expectation=mips, xbar=xbar,
                                mipar_ps_at_xbar=_decimal(ps_at_xbar), mipar_expectation=mipar)
