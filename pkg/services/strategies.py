"""
Missing-confounder strategies for IPTW

Each strategy maps a Dataset to one EffectEstimate per measure. All three
measures of a strategy come from the same pair of marginal means.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import Config
from services.iptw import (MEASURES, EffectEstimate, EffectMeasure, FittedPS, MIVarianceInputs,
                           VarianceFlavor, effect, estimate_ps, iptw_means, scores_from,
                           var_mipar, var_ps_corrected, var_uncorrected)
from services.mice import Dataset, ImputationConfig, ImputationSet, impute
from services.numstat import add_intercept
from utils.errors import IPTWError, ParameterError, StrategyFailure
from utils.logger import get_logger

logger = get_logger(__name__)


class Strategy(Enum):
    CRUDE = 'Crude'
    FULL = 'Full'
    CC = 'CC'
    MP = 'MP'
    MITE = 'MIte'
    MIPS = 'MIps'
    MIPAR = 'MIpar'

    @classmethod
    def parse(cls, name: str) -> 'Strategy':
        for member in cls:
            if name.lower() in (member.value.lower(), member.name.lower()):
                return member
        raise ParameterError(f"unknown strategy {name!r}; choose from {[m.value for m in cls]}")


MI_STRATEGIES = (Strategy.MITE, Strategy.MIPS, Strategy.MIPAR)


class PooledKind(Enum):
    AVG_SCORE = 'avg_score'
    SCORE_OF_AVG = 'score_of_avg'


@dataclass
class PooledPS:
    kind: PooledKind
    scores: np.ndarray
    W: np.ndarray
    B: np.ndarray
    M: int
    xbar: np.ndarray
    alpha_bar: Optional[np.ndarray] = None


@dataclass
class StrategyResult:
    """
    Estimates for every measure plus what the balance views need:
    ``rows`` are the dataset positions that entered the estimate and
    ``scores`` their propensity scores.
    """

    strategy: Strategy
    estimates: Dict[EffectMeasure, EffectEstimate]
    n_used: int
    rows: np.ndarray
    scores: np.ndarray
    ps: Optional[FittedPS] = None
    pooled: Optional[PooledPS] = None
    per_imputation: List[dict] = field(default_factory=list)
    strata: List[dict] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    def estimate(self, measure: EffectMeasure) -> EffectEstimate:
        return self.estimates[measure]


@dataclass
class RubinPooled:
    estimate: float
    within: float
    between: float
    total: float


def rubin_pool(estimates: Sequence[float], variances: Sequence[float]) -> RubinPooled:
    """Rubin's rules: mean estimate, W-bar + (1 + 1/M) B with B over the estimates"""
    estimates = np.asarray(estimates, dtype=float)
    variances = np.asarray(variances, dtype=float)
    m = estimates.size
    if m < 2 or variances.size != m:
        raise ParameterError("Rubin pooling needs at least two estimates with matching variances")
    within = float(variances.mean())
    between = float(estimates.var(ddof=1))
    return RubinPooled(estimate=float(estimates.mean()), within=within, between=between,
                       total=within + (1.0 + 1.0 / m) * between)


# --- shared pipeline ---

def _observed_yz(dataset: Dataset, strategy: Strategy) -> Tuple[np.ndarray, np.ndarray]:
    y, z = dataset.y, dataset.z
    if np.isnan(y).any() or np.isnan(z).any():
        raise StrategyFailure(strategy.value, "needs a fully observed outcome and treatment")
    return y, z


def _single_estimates(y, z, scores, design: Optional[np.ndarray], alpha_cov: Optional[np.ndarray],
                      headline: VarianceFlavor, notes: list,
                      mi_inputs: Optional[MIVarianceInputs] = None) -> Dict[EffectMeasure, EffectEstimate]:
    means = iptw_means(y, z, scores)
    notes.extend(means.warnings)
    out = {}
    for measure in MEASURES:
        theta = effect(means.mu1, means.mu0, measure)
        variances = {VarianceFlavor.UNCORRECTED: var_uncorrected(y, z, scores, means.mu1, means.mu0, measure)}
        if alpha_cov is not None:
            variances[VarianceFlavor.PS_CORRECTED] = var_ps_corrected(
                y, z, design, scores, alpha_cov, means.mu1, means.mu0, measure, notes)
        if mi_inputs is not None:
            variances[VarianceFlavor.PS_PLUS_MI] = var_mipar(
                y, z, design, scores, mi_inputs.W, mi_inputs.B, mi_inputs.M,
                means.mu1, means.mu0, measure, notes)
        out[measure] = EffectEstimate.build(measure, theta, variances[headline], means.mu1, means.mu0,
                                            headline, other_variances=variances, warnings=notes)
    return out


def _run(strategy: Strategy, func, *args, **kwargs) -> StrategyResult:
    """Turn numerical failures inside a strategy into a StrategyFailure"""
    try:
        return func(*args, **kwargs)
    except StrategyFailure:
        raise
    except IPTWError as e:
        raise StrategyFailure(strategy.value, str(e)) from e


# --- single-dataset strategies ---

def analyze_crude(dataset: Dataset) -> StrategyResult:
    """Unweighted contrast: every individual gets the same score (the treated share)"""
    def _crude():
        rows = np.flatnonzero(~(np.isnan(dataset.y) | np.isnan(dataset.z)))
        y, z = dataset.y[rows], dataset.z[rows]
        scores = np.full(rows.size, z.mean())
        notes = []
        estimates = _single_estimates(y, z, scores, None, None, VarianceFlavor.UNCORRECTED, notes)
        return StrategyResult(Strategy.CRUDE, estimates, n_used=rows.size, rows=rows,
                              scores=scores, warnings=notes)
    return _run(Strategy.CRUDE, _crude)


def _complete_pipeline(strategy: Strategy, dataset: Dataset, rows: np.ndarray) -> StrategyResult:
    sub = dataset.subset(rows)
    ps = estimate_ps(sub.covariate_matrix(), sub.z)
    notes = []
    estimates = _single_estimates(sub.y, sub.z, ps.scores, ps.design, ps.alpha_cov,
                                  VarianceFlavor.PS_CORRECTED, notes)
    return StrategyResult(strategy, estimates, n_used=rows.size, rows=rows, scores=ps.scores,
                          ps=ps, warnings=notes)


def analyze_full(full: Dataset) -> StrategyResult:
    """IPTW on the pre-deletion data with the PS-corrected variance"""
    if full.mask.to_numpy().any():
        raise StrategyFailure(Strategy.FULL.value, "requires complete (pre-deletion) data")
    return _run(Strategy.FULL, _complete_pipeline, Strategy.FULL, full, np.arange(full.n))


def analyze_cc(dataset: Dataset, min_rows: int = None) -> StrategyResult:
    """IPTW restricted to rows without any missing cell"""
    min_rows = Config.MIN_CC_ROWS if min_rows is None else min_rows
    rows = dataset.complete_rows()
    z = dataset.z[rows]
    treated, control = int(np.sum(z == 1)), int(np.sum(z == 0))
    if min(treated, control) < min_rows:
        raise StrategyFailure(Strategy.CC.value,
                              f"too few complete rows (treated={treated}, control={control}, "
                              f"minimum {min_rows} per arm)")
    return _run(Strategy.CC, _complete_pipeline, Strategy.CC, dataset, rows)


# --- missingness pattern ---

def _merge_patterns(patterns: Dict[Tuple[bool, ...], np.ndarray], z: np.ndarray,
                    min_stratum: int) -> List[Tuple[Tuple[bool, ...], np.ndarray]]:
    """
    Merge sparse patterns into the nearest pattern missing a superset of
    columns (falling back to the nearest pattern overall). A merged stratum
    only uses covariates observed in every member row.
    """
    strata = {key: rows for key, rows in patterns.items()}

    def ok(rows):
        arm = z[rows]
        return rows.size >= min_stratum and 0 < arm.sum() < rows.size

    while True:
        sparse = [k for k, rows in strata.items() if not ok(rows)]
        if not sparse:
            break
        if len(strata) == 1:
            raise StrategyFailure(Strategy.MP.value,
                                  f"pattern strata cannot be merged to reach {min_stratum} rows with both arms")
        key = min(sparse, key=lambda k: (strata[k].size, k))
        others = [k for k in strata if k != key]
        supersets = [k for k in others if all(o or not s for s, o in zip(key, k))]
        pool = supersets or others
        target = min(pool, key=lambda k: (sum(a != b for a, b in zip(key, k)), -strata[k].size, k))
        merged_key = tuple(a or b for a, b in zip(key, target))
        merged_rows = np.sort(np.concatenate([strata.pop(key), strata.pop(target)]))
        if merged_key in strata:
            merged_rows = np.sort(np.concatenate([strata.pop(merged_key), merged_rows]))
        strata[merged_key] = merged_rows
        logger.debug(f"MP merged pattern {key} into {target} -> {merged_key}")

    return sorted(strata.items(), key=lambda item: item[0])


def analyze_mp(dataset: Dataset, min_stratum: int = None) -> StrategyResult:
    """
    Generalized propensity score: a separate PS model per missingness pattern
    using the covariates observed in that pattern; variance is uncorrected.
    """
    min_stratum = Config.MIN_STRATUM if min_stratum is None else min_stratum

    def _mp():
        y, z = _observed_yz(dataset, Strategy.MP)
        mask = dataset.mask[list(dataset.covariates)].to_numpy()
        patterns: Dict[Tuple[bool, ...], List[int]] = {}
        for i, row in enumerate(mask):
            patterns.setdefault(tuple(bool(v) for v in row), []).append(i)
        strata = _merge_patterns({k: np.asarray(v) for k, v in patterns.items()}, z, min_stratum)

        scores = np.empty(dataset.n)
        records = []
        for key, rows in strata:
            observed = [c for c, missing in zip(dataset.covariates, key) if not missing]
            covs = dataset.frame.loc[rows, observed].to_numpy(dtype=float) if observed \
                else np.empty((rows.size, 0))
            ps = estimate_ps(covs, z[rows])
            scores[rows] = ps.scores
            records.append({'pattern': key, 'covariates': observed, 'n': int(rows.size),
                            'alpha': ps.alpha})

        notes = []
        estimates = _single_estimates(y, z, scores, None, None, VarianceFlavor.UNCORRECTED, notes)
        return StrategyResult(Strategy.MP, estimates, n_used=dataset.n, rows=np.arange(dataset.n),
                              scores=scores, strata=records, warnings=notes)
    return _run(Strategy.MP, _mp)


# --- multiple imputation ---

def _imputations(dataset: Dataset, config: ImputationConfig,
                 imputations: Optional[ImputationSet], strategy: Strategy) -> ImputationSet:
    if imputations is not None:
        return imputations
    try:
        return impute(dataset, config)
    except StrategyFailure as e:
        raise StrategyFailure(strategy.value, e.reason) from e


def fit_imputed_ps(imputations: ImputationSet, strategy: Strategy = Strategy.MITE) -> List[FittedPS]:
    """One propensity model per completed dataset"""
    fits = []
    for k, completed in enumerate(imputations.completed):
        try:
            fits.append(estimate_ps(completed.covariate_matrix(), completed.z))
        except IPTWError as e:
            raise StrategyFailure(strategy.value, f"PS fit failed on imputation {k}: {e}") from e
    return fits


def analyze_mite(dataset: Dataset, config: ImputationConfig = None,
                 imputations: ImputationSet = None, fits: List[FittedPS] = None) -> StrategyResult:
    """Rubin's rules on the per-imputation treatment effects"""
    config = config or ImputationConfig()

    def _mite():
        imps = _imputations(dataset, config, imputations, Strategy.MITE)
        ps_fits = fits or fit_imputed_ps(imps)
        per_imp = []
        notes = []
        for k, (completed, ps) in enumerate(zip(imps.completed, ps_fits)):
            try:
                ests = _single_estimates(completed.y, completed.z, ps.scores, ps.design, ps.alpha_cov,
                                         VarianceFlavor.PS_CORRECTED, notes)
            except IPTWError as e:
                raise StrategyFailure(Strategy.MITE.value, f"imputation {k}: {e}") from e
            per_imp.append({'k': k, 'alpha': ps.alpha, 'scores': ps.scores, 'estimates': ests})

        estimates = {}
        for measure in MEASURES:
            thetas = [r['estimates'][measure].estimate for r in per_imp]
            corrected = rubin_pool(thetas, [r['estimates'][measure].variance for r in per_imp])
            naive = rubin_pool(thetas, [r['estimates'][measure].other_variances[VarianceFlavor.UNCORRECTED]
                                        for r in per_imp])
            mu1 = float(np.mean([r['estimates'][measure].mu1 for r in per_imp]))
            mu0 = float(np.mean([r['estimates'][measure].mu0 for r in per_imp]))
            estimates[measure] = EffectEstimate.build(
                measure, corrected.estimate, corrected.total, mu1, mu0, VarianceFlavor.PS_PLUS_MI,
                other_variances={VarianceFlavor.RUBIN_UNCORRECTED: naive.total,
                                 VarianceFlavor.WITHIN_PS_CORRECTED: corrected.within}, warnings=notes)

        pooled_scores = np.mean([ps.scores for ps in ps_fits], axis=0)
        return StrategyResult(Strategy.MITE, estimates, n_used=dataset.n, rows=np.arange(dataset.n),
                              scores=pooled_scores, per_imputation=per_imp, warnings=notes)
    return _run(Strategy.MITE, _mite)


def pool_ps(imputations: ImputationSet, fits: List[FittedPS], kind: PooledKind) -> PooledPS:
    """Pool propensity information across imputations (average score or score of averages)"""
    inputs = MIVarianceInputs.from_fits(fits)
    xbar = add_intercept(imputations.averaged()[list(imputations.completed[0].covariates)].to_numpy())
    if kind is PooledKind.AVG_SCORE:
        scores = np.mean([ps.scores for ps in fits], axis=0)
        return PooledPS(kind, scores, inputs.W, inputs.B, inputs.M, xbar)
    alpha_bar = np.mean([ps.alpha for ps in fits], axis=0)
    return PooledPS(kind, scores_from(xbar, alpha_bar), inputs.W, inputs.B, inputs.M, xbar, alpha_bar)


def _pooled_strategy(strategy: Strategy, kind: PooledKind, dataset: Dataset,
                     config: ImputationConfig, imputations: Optional[ImputationSet],
                     fits: Optional[List[FittedPS]]) -> StrategyResult:
    y, z = _observed_yz(dataset, strategy)
    imps = _imputations(dataset, config, imputations, strategy)
    ps_fits = fits or fit_imputed_ps(imps, strategy)
    pooled = pool_ps(imps, ps_fits, kind)
    inputs = MIVarianceInputs(W=pooled.W, B=pooled.B, M=pooled.M)
    notes = []
    estimates = _single_estimates(y, z, pooled.scores, pooled.xbar, pooled.W,
                                  VarianceFlavor.PS_PLUS_MI, notes, mi_inputs=inputs)
    per_imp = [{'k': k, 'alpha': ps.alpha, 'scores': ps.scores} for k, ps in enumerate(ps_fits)]
    return StrategyResult(strategy, estimates, n_used=dataset.n, rows=np.arange(dataset.n),
                          scores=pooled.scores, pooled=pooled, per_imputation=per_imp, warnings=notes)


def analyze_mips(dataset: Dataset, config: ImputationConfig = None,
                 imputations: ImputationSet = None, fits: List[FittedPS] = None) -> StrategyResult:
    """Single IPTW estimate on each individual's PS averaged across imputations"""
    config = config or ImputationConfig()
    return _run(Strategy.MIPS, _pooled_strategy, Strategy.MIPS, PooledKind.AVG_SCORE,
                dataset, config, imputations, fits)


def analyze_mipar(dataset: Dataset, config: ImputationConfig = None,
                  imputations: ImputationSet = None, fits: List[FittedPS] = None) -> StrategyResult:
    """Single IPTW estimate on the PS of averaged covariates under averaged parameters"""
    config = config or ImputationConfig()
    return _run(Strategy.MIPAR, _pooled_strategy, Strategy.MIPAR, PooledKind.SCORE_OF_AVG,
                dataset, config, imputations, fits)


def analyze(strategy: Strategy, dataset: Dataset, config: ImputationConfig = None,
            full: Dataset = None, min_stratum: int = None, min_rows: int = None) -> StrategyResult:
    """Dispatch one strategy by name"""
    if strategy is Strategy.FULL:
        if full is None:
            raise ParameterError("the Full strategy needs the pre-deletion dataset")
        return analyze_full(full)
    if strategy is Strategy.CRUDE:
        return analyze_crude(dataset)
    if strategy is Strategy.CC:
        return analyze_cc(dataset, min_rows)
    if strategy is Strategy.MP:
        return analyze_mp(dataset, min_stratum)
    handlers = {Strategy.MITE: analyze_mite, Strategy.MIPS: analyze_mips, Strategy.MIPAR: analyze_mipar}
    return handlers[strategy](dataset, config)
