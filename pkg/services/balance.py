"""
Covariate balance diagnostics

Standardized differences (percent) for continuous and binary covariates,
unweighted or IPTW-weighted, and the per-strategy views of the balance grid:
full data, each imputed dataset, the average imputed dataset, and the
observed / imputed (or missing) parts of partially observed covariates.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional

import numpy as np
import pandas as pd

from services.iptw import iptw_weights
from services.mice import ColumnKind, Dataset, ImputationSet
from services.strategies import Strategy, StrategyResult
from utils.errors import EstimationError, ParameterError
from utils.logger import get_logger

logger = get_logger(__name__)


class BalanceView(Enum):
    CRUDE = 'crude'
    WEIGHTED_FULL = 'weighted_full'
    WEIGHTED_COMPLETE_CASES = 'weighted_complete_cases'
    WEIGHTED_PER_IMPUTATION = 'weighted_per_imputation'
    WEIGHTED_AVG_IMPUTED = 'weighted_avg_imputed'
    OBSERVED_PART = 'observed_part'
    IMPUTED_PART = 'imputed_part'
    MISSING_PART = 'missing_part'


@dataclass
class BalanceEntry:
    name: str
    sdiff_percent: float
    view: BalanceView


@dataclass
class BalanceReport:
    strategy: Strategy
    entries: List[BalanceEntry] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    def add(self, name: str, value: float, view: BalanceView) -> None:
        self.entries.append(BalanceEntry(name, float(value), view))

    def get(self, name: str, view: BalanceView) -> Optional[float]:
        for entry in self.entries:
            if entry.name == name and entry.view is view:
                return entry.sdiff_percent
        return None

    def views(self) -> List[BalanceView]:
        seen = []
        for entry in self.entries:
            if entry.view not in seen:
                seen.append(entry.view)
        return seen

    def as_frame(self) -> pd.DataFrame:
        """One row per view, one column per covariate; absent entries are NaN"""
        rows = [{'strategy': self.strategy.value, 'view': e.view.value, 'covariate': e.name,
                 'sdiff': e.sdiff_percent} for e in self.entries]
        if not rows:
            return pd.DataFrame(columns=['strategy', 'view'])
        frame = pd.DataFrame(rows)
        names = list(dict.fromkeys(frame['covariate']))
        wide = frame.pivot_table(index=['strategy', 'view'], columns='covariate', values='sdiff',
                                 sort=False, dropna=False)
        wide = wide.reindex(columns=names).reset_index()
        wide.columns.name = None
        order = {v.value: i for i, v in enumerate(self.views())}
        return wide.sort_values('view', key=lambda s: s.map(order), kind='stable').reset_index(drop=True)


# --- standardized differences ---

def _arms(x, z, weights):
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    if not (x.shape == z.shape == w.shape):
        raise ParameterError(f"x, z and weights must have equal length ({x.shape}, {z.shape}, {w.shape})")
    treated = z == 1
    if not treated.any() or treated.all():
        raise EstimationError("standardized difference needs both treatment arms")
    return (x[treated], w[treated]), (x[~treated], w[~treated])


def _weighted_moments(x: np.ndarray, w: np.ndarray):
    mean = float(np.sum(w * x) / np.sum(w))
    var = float(np.sum(w * (x - mean) ** 2) / np.sum(w))
    return mean, var


def _standardize(diff: float, pooled: float, notes: Optional[list]) -> float:
    if pooled <= 0.0:
        msg = "zero pooled variance in standardized difference"
        logger.warning(msg)
        if notes is not None:
            notes.append(msg)
        return float('nan')
    return 100.0 * abs(diff) / np.sqrt(pooled)


def sdiff_continuous(x, z, weights=None, notes: Optional[list] = None) -> float:
    """100 |mean1 - mean0| / sqrt((s1^2 + s0^2) / 2), weighted when weights are given"""
    (x1, w1), (x0, w0) = _arms(x, z, weights)
    m1, v1 = _weighted_moments(x1, w1)
    m0, v0 = _weighted_moments(x0, w0)
    return _standardize(m1 - m0, (v1 + v0) / 2.0, notes)


def sdiff_binary(x, z, weights=None, notes: Optional[list] = None) -> float:
    """100 |P1 - P0| / sqrt((P1(1-P1) + P0(1-P0)) / 2)"""
    (x1, w1), (x0, w0) = _arms(x, z, weights)
    p1 = float(np.sum(w1 * x1) / np.sum(w1))
    p0 = float(np.sum(w0 * x0) / np.sum(w0))
    return _standardize(p1 - p0, (p1 * (1 - p1) + p0 * (1 - p0)) / 2.0, notes)


def sdiff(x, z, kind: ColumnKind, weights=None, notes: Optional[list] = None) -> float:
    if kind is ColumnKind.BINARY:
        return sdiff_binary(x, z, weights, notes)
    return sdiff_continuous(x, z, weights, notes)


def _column_sdiff(frame: pd.DataFrame, dataset: Dataset, name: str, z, weights, rows, notes) -> float:
    x = frame[name].to_numpy(dtype=float)[rows]
    w = None if weights is None else weights[rows]
    return sdiff(x, z[rows], dataset.kinds[name], w, notes)


# --- views ---

def _all_rows(n: int) -> np.ndarray:
    return np.arange(n)


def balance_views(result: StrategyResult, dataset: Dataset, full: Dataset = None,
                  imputations: ImputationSet = None) -> BalanceReport:
    """
    Balance grid for one strategy

    Args:
        result: the strategy result (scores, rows, per-imputation scores)
        dataset: the analysed (possibly incomplete) dataset
        full: pre-deletion data when available (simulation)
        imputations: the completed datasets used by an MI strategy

    Views produced: Crude and Full on full data; CC on its complete cases;
    MP on full data, observed and missing parts; MIte on full data and on
    each imputed dataset; MIps/MIpar on full data, the average imputed
    dataset and the observed / imputed parts.
    """
    report = BalanceReport(result.strategy)
    notes = report.warnings
    z = dataset.z
    reference = full if full is not None else dataset
    covariates = dataset.covariates
    mask = dataset.mask

    def add_view(frame, view, weights, rows_for=None):
        for name in covariates:
            rows = rows_for(name) if rows_for else _all_rows(len(frame))
            if rows is None:
                continue
            sub_z = frame[dataset.treatment].to_numpy(dtype=float)
            if rows.size == 0 or len(np.unique(sub_z[rows])) < 2:
                continue
            report.add(name, _column_sdiff(frame, dataset, name, sub_z, weights, rows, notes), view)

    strategy = result.strategy

    if strategy is Strategy.CRUDE:
        frame = reference.frame
        complete = reference.complete_rows()
        add_view(frame.iloc[complete].reset_index(drop=True), BalanceView.CRUDE, None)
        return report

    if strategy in (Strategy.FULL, Strategy.CC):
        sub = reference.subset(result.rows) if strategy is Strategy.FULL else dataset.subset(result.rows)
        weights = iptw_weights(sub.z, result.scores)
        view = BalanceView.WEIGHTED_FULL if strategy is Strategy.FULL else BalanceView.WEIGHTED_COMPLETE_CASES
        add_view(sub.frame, view, weights)
        return report

    if strategy is Strategy.MP:
        weights = iptw_weights(z, result.scores)
        if full is not None:
            add_view(full.frame, BalanceView.WEIGHTED_FULL, weights)
        add_view(dataset.frame, BalanceView.OBSERVED_PART, weights,
                 lambda name: np.flatnonzero(~mask[name].to_numpy()))
        if full is not None:
            add_view(full.frame, BalanceView.MISSING_PART, weights,
                     lambda name: _missing_rows(mask, name))
        return report

    if imputations is None:
        raise ParameterError(f"{strategy.value} balance needs the imputation set")

    if strategy is Strategy.MITE:
        per_imp = result.per_imputation
        if full is not None:
            _averaged_view(report, [(full.frame, iptw_weights(full.z, r['scores'])) for r in per_imp],
                           dataset, BalanceView.WEIGHTED_FULL, notes)
        _averaged_view(report, [(c.frame, iptw_weights(c.z, r['scores']))
                                for c, r in zip(imputations.completed, per_imp)],
                       dataset, BalanceView.WEIGHTED_PER_IMPUTATION, notes)
        return report

    # MIps / MIpar: the pooled score weights every view
    weights = iptw_weights(z, result.scores)
    averaged = imputations.averaged()
    if full is not None:
        add_view(full.frame, BalanceView.WEIGHTED_FULL, weights)
    add_view(averaged, BalanceView.WEIGHTED_AVG_IMPUTED, weights)
    add_view(averaged, BalanceView.OBSERVED_PART, weights,
             lambda name: np.flatnonzero(~mask[name].to_numpy()))
    add_view(averaged, BalanceView.IMPUTED_PART, weights, lambda name: _missing_rows(mask, name))
    return report


def _missing_rows(mask: pd.DataFrame, name: str) -> Optional[np.ndarray]:
    rows = np.flatnonzero(mask[name].to_numpy())
    return rows if rows.size else None


def _averaged_view(report: BalanceReport, pairs, dataset: Dataset, view: BalanceView, notes) -> None:
    """SDiff per covariate averaged over (frame, weights) pairs"""
    for name in dataset.covariates:
        values = []
        for frame, weights in pairs:
            zk = frame[dataset.treatment].to_numpy(dtype=float)
            values.append(sdiff(frame[name].to_numpy(dtype=float), zk, dataset.kinds[name], weights, notes))
        values = np.asarray(values)
        finite = values[~np.isnan(values)]
        report.add(name, float(finite.mean()) if finite.size else float('nan'), view)
