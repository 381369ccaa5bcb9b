"""
Multiple imputation by chained equations (fully conditional specification)

Continuous columns are imputed by Bayesian normal linear regression (or
predictive mean matching), binary columns by logistic regression with a
posterior coefficient draw. Every partially observed column is modelled on
all other columns (main effects); the outcome enters as a predictor only
when ``include_outcome`` is set.
"""
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit

from config import Config
from services.numstat import (RngStream, add_intercept, fit_linear, fit_linear_bayes_draw,
                              fit_logistic, logistic_posterior_draw)
from utils.errors import (ConvergenceError, ParameterError, SeparationError,
                          StrategyFailure)
from utils.logger import get_logger

logger = get_logger(__name__)


class ColumnKind(Enum):
    CONTINUOUS = 'continuous'
    BINARY = 'binary'


@dataclass
class Dataset:
    """
    Outcome, treatment and named covariates; NaN marks a missing cell

    Columns are declared in the order covariates, treatment, outcome; this is
    also the default imputation visit order.
    """

    frame: pd.DataFrame
    outcome: str
    treatment: str
    covariates: Tuple[str, ...]
    kinds: Dict[str, ColumnKind]

    def __post_init__(self):
        self.covariates = tuple(self.covariates)
        missing = [c for c in self.columns if c not in self.frame.columns]
        if missing:
            raise ParameterError(f"dataset frame lacks declared columns {missing}")
        undeclared = [c for c in self.columns if c not in self.kinds]
        if undeclared:
            raise ParameterError(f"column kinds not declared for {undeclared}")
        for col in (self.outcome, self.treatment):
            if self.kinds[col] is not ColumnKind.BINARY:
                raise ParameterError(f"{col!r} must be binary")
        self.frame = self.frame.loc[:, list(self.columns)].astype(float).reset_index(drop=True)
        for col in self.columns:
            if self.kinds[col] is ColumnKind.BINARY:
                observed = self.frame[col].dropna()
                if not observed.isin((0.0, 1.0)).all():
                    raise ParameterError(f"binary column {col!r} holds values other than 0/1")

    @classmethod
    def from_arrays(cls, y, z, covariates: Dict[str, np.ndarray],
                    kinds: Dict[str, ColumnKind] = None,
                    outcome: str = 'Y', treatment: str = 'Z') -> 'Dataset':
        kinds = dict(kinds or {})
        data = {name: np.asarray(values, dtype=float) for name, values in covariates.items()}
        data[treatment] = np.asarray(z, dtype=float)
        data[outcome] = np.asarray(y, dtype=float)
        for name, values in covariates.items():
            kinds.setdefault(name, _infer_kind(np.asarray(values, dtype=float)))
        kinds[outcome] = ColumnKind.BINARY
        kinds[treatment] = ColumnKind.BINARY
        return cls(frame=pd.DataFrame(data), outcome=outcome, treatment=treatment,
                   covariates=tuple(covariates), kinds=kinds)

    @property
    def columns(self) -> Tuple[str, ...]:
        return self.covariates + (self.treatment, self.outcome)

    @property
    def n(self) -> int:
        return len(self.frame)

    @property
    def y(self) -> np.ndarray:
        return self.frame[self.outcome].to_numpy()

    @property
    def z(self) -> np.ndarray:
        return self.frame[self.treatment].to_numpy()

    @property
    def mask(self) -> pd.DataFrame:
        return self.frame.isna()

    def covariate_matrix(self, columns: Sequence[str] = None) -> np.ndarray:
        return self.frame.loc[:, list(columns or self.covariates)].to_numpy(dtype=float)

    def partially_observed(self) -> List[str]:
        counts = self.frame.isna().sum()
        return [c for c in self.columns if counts[c] > 0]

    def complete_rows(self, columns: Sequence[str] = None) -> np.ndarray:
        cols = list(columns or self.columns)
        return np.flatnonzero(~self.frame[cols].isna().any(axis=1).to_numpy())

    def subset(self, rows: np.ndarray) -> 'Dataset':
        return replace(self, frame=self.frame.iloc[rows].reset_index(drop=True))

    def with_frame(self, frame: pd.DataFrame) -> 'Dataset':
        return replace(self, frame=frame)


def _infer_kind(values: np.ndarray) -> ColumnKind:
    observed = values[~np.isnan(values)]
    if observed.size and np.isin(observed, (0.0, 1.0)).all():
        return ColumnKind.BINARY
    return ColumnKind.CONTINUOUS


@dataclass
class ImputationConfig:
    M: int = Config.M
    cycles: int = Config.CYCLES
    include_outcome: bool = True
    rng: RngStream = field(default_factory=lambda: RngStream(Config.SEED))
    visit_order: Optional[Tuple[str, ...]] = None
    pmm: bool = False
    pmm_donors: int = Config.PMM_DONORS
    max_retries: int = Config.IMPUTATION_RETRIES

    def __post_init__(self):
        if self.M < 2:
            raise ParameterError(f"M must be at least 2, got {self.M}")
        if self.cycles < 1:
            raise ParameterError(f"cycles must be at least 1, got {self.cycles}")


@dataclass
class ImputationSet:
    completed: List[Dataset]
    config: ImputationConfig
    missing: pd.DataFrame

    @property
    def M(self) -> int:
        return len(self.completed)

    def stacked(self, column: str) -> np.ndarray:
        """M x n array of one column across the completed datasets"""
        return np.vstack([d.frame[column].to_numpy() for d in self.completed])

    def averaged(self) -> pd.DataFrame:
        """Per-individual average of every column across imputations (binary kept fractional)"""
        total = sum(d.frame for d in self.completed)
        return total / self.M


@dataclass
class MissingnessSummary:
    rates: Dict[str, float]
    patterns: List[Tuple[Tuple[bool, ...], int]]
    columns: Tuple[str, ...]

    def as_frame(self) -> pd.DataFrame:
        rows = [dict(zip(self.columns, mask), count=count) for mask, count in self.patterns]
        return pd.DataFrame(rows, columns=list(self.columns) + ['count'])


def missingness_summary(dataset: Dataset) -> MissingnessSummary:
    """Missing rate per column and the distinct missingness patterns with counts"""
    mask = dataset.mask
    rates = {c: float(mask[c].mean()) for c in dataset.columns}
    grouped = mask.groupby(list(dataset.columns), sort=True).size()
    patterns = []
    for key, count in grouped.items():
        key = key if isinstance(key, tuple) else (key,)
        patterns.append((tuple(bool(k) for k in key), int(count)))
    patterns.sort(key=lambda item: (-item[1], item[0]))
    return MissingnessSummary(rates=rates, patterns=patterns, columns=dataset.columns)


class ChainedImputer:
    """Runs M independent FCS chains over one dataset"""

    def __init__(self, dataset: Dataset, config: ImputationConfig):
        self.dataset = dataset
        self.config = config
        self.mask = dataset.mask
        self.targets = self._visit_order()
        self._check_preconditions()

    def __repr__(self):
        return f"<ChainedImputer targets={self.targets} M={self.config.M} cycles={self.config.cycles}>"

    def _visit_order(self) -> List[str]:
        partial = self.dataset.partially_observed()
        if self.config.visit_order is None:
            return partial
        unknown = [c for c in self.config.visit_order if c not in self.dataset.columns]
        if unknown:
            raise ParameterError(f"visit_order names unknown columns {unknown}")
        ordered = [c for c in self.config.visit_order if c in partial]
        return ordered + [c for c in partial if c not in ordered]

    def predictors_for(self, target: str) -> List[str]:
        ds = self.dataset
        cols = [c for c in ds.covariates if c != target]
        if target != ds.treatment:
            cols.append(ds.treatment)
        if target != ds.outcome and self.config.include_outcome:
            cols.append(ds.outcome)
        return cols

    def _check_preconditions(self) -> None:
        observed = (~self.mask).sum()
        for target in self.targets:
            needed = len(self.predictors_for(target)) + 2
            if observed[target] < needed:
                raise StrategyFailure(
                    'impute', f"column {target!r} has {observed[target]} observed rows, needs {needed}"
                )
        fully_observed = [c for c in self.dataset.columns if c not in self.targets]
        if self.targets and not fully_observed:
            raise StrategyFailure('impute', "no fully observed column to anchor the imputation models")

    def run(self) -> ImputationSet:
        completed = [self._chain(k) for k in range(self.config.M)]
        return ImputationSet(completed=completed, config=self.config, missing=self.mask.copy())

    def _chain(self, k: int) -> Dataset:
        frame = self.dataset.frame.copy()
        if not self.targets:
            return self.dataset.with_frame(frame)

        gen = self.config.rng.child(k).generator()
        for target in self.targets:
            self._draw_from_marginal(frame, target, gen)

        for cycle in range(self.config.cycles):
            for target in self.targets:
                self._update(frame, target, gen, k, cycle)
        return self.dataset.with_frame(frame)

    def _draw_from_marginal(self, frame: pd.DataFrame, target: str, gen: np.random.Generator) -> None:
        miss = self.mask[target].to_numpy()
        pool = self.dataset.frame.loc[~miss, target].to_numpy()
        frame.loc[miss, target] = gen.choice(pool, size=int(miss.sum()), replace=True)

    def _update(self, frame: pd.DataFrame, target: str, gen: np.random.Generator,
                chain: int, cycle: int) -> None:
        miss = self.mask[target].to_numpy()
        predictors = self.predictors_for(target)

        for attempt in range(self.config.max_retries + 1):
            design = add_intercept(frame[predictors].to_numpy(dtype=float))
            response = frame[target].to_numpy(dtype=float)
            try:
                draws = self._draw_missing(design, response, miss, target, gen)
                frame.loc[miss, target] = draws
                return
            except (SeparationError, ConvergenceError) as e:
                logger.debug(f"chain {chain} cycle {cycle}: {target} model failed ({e}); "
                             f"re-sampling predictors (attempt {attempt + 1})")
                # re-draw the imputed cells of the predictors before refitting
                for col in predictors:
                    if col in self.targets:
                        self._draw_from_marginal(frame, col, gen)

        raise StrategyFailure(
            'impute', f"imputation model for {target!r} failed after {self.config.max_retries} retries "
                      f"(chain {chain}, cycle {cycle})"
        )

    def _draw_missing(self, design: np.ndarray, response: np.ndarray, miss: np.ndarray,
                      target: str, gen: np.random.Generator) -> np.ndarray:
        obs = ~miss
        x_obs, y_obs, x_mis = design[obs], response[obs], design[miss]

        if self.dataset.kinds[target] is ColumnKind.BINARY:
            fit = fit_logistic(x_obs, y_obs)
            alpha = logistic_posterior_draw(fit, gen)
            return (gen.random(x_mis.shape[0]) < expit(x_mis @ alpha)).astype(float)

        beta, sigma = fit_linear_bayes_draw(x_obs, y_obs, gen)
        if self.config.pmm:
            return self._pmm(x_obs, y_obs, x_mis, beta, gen)
        return x_mis @ beta + sigma * gen.standard_normal(x_mis.shape[0])

    def _pmm(self, x_obs, y_obs, x_mis, beta, gen) -> np.ndarray:
        """Predictive mean matching: donors are the closest observed predictions"""
        beta_hat = fit_linear(x_obs, y_obs).coefficients
        yhat_obs = x_obs @ beta_hat
        yhat_mis = x_mis @ beta
        donors = min(self.config.pmm_donors, yhat_obs.size)
        order = np.argsort(np.abs(yhat_mis[:, None] - yhat_obs[None, :]), axis=1)[:, :donors]
        picks = order[np.arange(order.shape[0]), gen.integers(0, donors, size=order.shape[0])]
        return y_obs[picks]


def impute(dataset: Dataset, config: ImputationConfig) -> ImputationSet:
    """
    Create M completed copies of the dataset

    Raises:
        StrategyFailure: preconditions not met or an imputation model keeps failing
    """
    imputer = ChainedImputer(dataset, config)
    logger.debug(f"Imputing {imputer}")
    return imputer.run()
