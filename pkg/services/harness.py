"""
Replication engine, metric aggregation and table emission

Each replication draws one dataset from its own random stream, applies every
strategy, and records estimates, all variance flavors, CI coverage and
balance. Replications run in a process pool; aggregation folds them in
replication order so results never depend on scheduling.
"""
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import orjson
import pandas as pd
from tqdm import tqdm

from config import Config
from services import __version__
from services.balance import BalanceReport, balance_views
from services.iptw import MEASURES, EffectMeasure, VarianceFlavor
from services.mice import Dataset, ImputationConfig, impute
from services.numstat import RngStream
from services.simgen import ScenarioConfig, ScenarioTruth, Variant, generate, truth_for
from services.strategies import (MI_STRATEGIES, Strategy, StrategyResult, analyze, analyze_cc,
                                 analyze_crude, analyze_full, analyze_mipar, analyze_mips,
                                 analyze_mite, analyze_mp, fit_imputed_ps)
from utils.errors import IPTWError, InputError, StrategyFailure
from utils.logger import get_logger

logger = get_logger(__name__)

STRATEGY_ORDER: Sequence[Strategy] = (Strategy.CRUDE, Strategy.FULL, Strategy.CC, Strategy.MP,
                                      Strategy.MITE, Strategy.MIPS, Strategy.MIPAR)
FLAVORS: Sequence[VarianceFlavor] = tuple(VarianceFlavor)
METRICS = ('bias', 'variance', *(f"variance_{flavor.value}" for flavor in FLAVORS),
           'empirical_variance', 'coverage', 'n_success', 'n_failed', 'mean_n')

# Strategies that need a fully observed outcome and treatment
_NEEDS_OBSERVED_YZ = (Strategy.MP, Strategy.MIPS, Strategy.MIPAR)


def applicable_strategies(config: ScenarioConfig) -> List[Strategy]:
    if config.variant is Variant.MISS_YZ_MCAR:
        return [s for s in STRATEGY_ORDER if s not in _NEEDS_OBSERVED_YZ]
    return list(STRATEGY_ORDER)


def _truth_value(truth: ScenarioTruth, measure: EffectMeasure) -> float:
    return {EffectMeasure.LOG_RR: truth.log_rr, EffectMeasure.LOG_OR: truth.log_or,
            EffectMeasure.RD: truth.rd}[measure]


# --- one replication ---

@dataclass
class ReplicationRecord:
    """Flat, picklable outcome of one replication"""

    rep: int
    rows: List[dict] = field(default_factory=list)
    failures: Dict[str, str] = field(default_factory=dict)
    balance: List[dict] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)


def _estimate_rows(rep: int, result: StrategyResult, truth: ScenarioTruth) -> List[dict]:
    rows = []
    for measure in MEASURES:
        est = result.estimates[measure]
        row = {
            'rep': rep, 'strategy': result.strategy.value, 'measure': measure.value,
            'estimate': est.estimate, 'variance': est.variance, 'variance_flavor': est.variance_flavor.value,
            'ci_low': est.ci_low, 'ci_high': est.ci_high, 'mu1': est.mu1, 'mu0': est.mu0,
            'covers': bool(est.covers(_truth_value(truth, measure))), 'n_used': result.n_used,
        }
        for flavor in FLAVORS:
            row[f"variance_{flavor.value}"] = est.other_variances.get(flavor)
        rows.append(row)
    return rows


def _balance_rows(rep: int, report: BalanceReport) -> List[dict]:
    return [{'rep': rep, 'strategy': report.strategy.value, 'view': e.view.value,
             'covariate': e.name, 'sdiff': e.sdiff_percent} for e in report.entries]


def run_replication(config: ScenarioConfig, truth: ScenarioTruth, rep: int,
                    with_balance: bool = True) -> ReplicationRecord:
    """
    Generate replication ``rep`` and apply every applicable strategy

    A strategy that fails is excluded for this replication only and its
    reason recorded.
    """
    stream = RngStream(config.seed, stream_id=rep)
    full, observed = generate(config, stream.child(0))
    record = ReplicationRecord(rep=rep)
    strategies = applicable_strategies(config)

    imputations, fits = None, None
    if any(s in MI_STRATEGIES for s in strategies):
        imp_config = ImputationConfig(M=config.M, include_outcome=config.include_outcome,
                                      rng=stream.child(1))
        try:
            imputations = impute(observed, imp_config)
            fits = fit_imputed_ps(imputations)
        except IPTWError as e:
            for s in strategies:
                if s in MI_STRATEGIES:
                    record.failures[s.value] = str(e)

    runners = {
        Strategy.CRUDE: lambda: analyze_crude(observed),
        Strategy.FULL: lambda: analyze_full(full),
        Strategy.CC: lambda: analyze_cc(observed),
        Strategy.MP: lambda: analyze_mp(observed),
        Strategy.MITE: lambda: analyze_mite(observed, imputations=imputations, fits=fits),
        Strategy.MIPS: lambda: analyze_mips(observed, imputations=imputations, fits=fits),
        Strategy.MIPAR: lambda: analyze_mipar(observed, imputations=imputations, fits=fits),
    }

    for strategy in strategies:
        if strategy.value in record.failures:
            continue
        try:
            result = runners[strategy]()
        except StrategyFailure as e:
            logger.debug(f"rep {rep}: {e}")
            record.failures[strategy.value] = e.reason
            continue
        record.rows.extend(_estimate_rows(rep, result, truth))
        record.warnings.extend(result.warnings)
        if with_balance:
            try:
                report = balance_views(result, full if strategy is Strategy.FULL else observed,
                                       full=full, imputations=imputations)
            except IPTWError as e:
                logger.debug(f"rep {rep}: balance for {strategy.value} unavailable ({e})")
                continue
            record.balance.extend(_balance_rows(rep, report))
    return record


def _run_one(args) -> ReplicationRecord:
    return run_replication(*args)


# --- aggregation ---

@dataclass
class ReplicationSummary:
    """
    Per (strategy, measure) metrics over the successful replications

    ``metrics`` holds one row per (measure, metric) with a column per strategy;
    empirical variance is absent when fewer than two replications succeeded.
    """

    config: ScenarioConfig
    truth: ScenarioTruth
    metrics: pd.DataFrame
    per_rep: pd.DataFrame
    balance: pd.DataFrame
    failures: Dict[str, Dict[int, str]]
    warnings: List[str] = field(default_factory=list)

    def value(self, strategy: Strategy, measure: EffectMeasure, metric: str) -> Optional[float]:
        row = self.metrics[(self.metrics['measure'] == measure.value) & (self.metrics['metric'] == metric)]
        if row.empty:
            return None
        value = row.iloc[0][strategy.value]
        return None if pd.isna(value) else float(value)

    def failure_share(self) -> Dict[str, float]:
        reps = self.config.reps
        return {name: len(failed) / reps for name, failed in self.failures.items()}


def summarize(config: ScenarioConfig, truth: ScenarioTruth,
              records: Sequence[ReplicationRecord]) -> ReplicationSummary:
    """Deterministic fold over replication order"""
    records = sorted(records, key=lambda r: r.rep)
    per_rep = pd.DataFrame([row for r in records for row in r.rows])
    failures: Dict[str, Dict[int, str]] = {s.value: {} for s in applicable_strategies(config)}
    for r in records:
        for name, reason in r.failures.items():
            failures.setdefault(name, {})[r.rep] = reason

    notes = []
    table = []
    for measure in MEASURES:
        truth_value = _truth_value(truth, measure)
        for metric in METRICS:
            table.append({'measure': measure.value, 'metric': metric})
        block = table[-len(METRICS):]
        for strategy in STRATEGY_ORDER:
            if per_rep.empty:
                sub = per_rep
            else:
                sub = per_rep[(per_rep['strategy'] == strategy.value) & (per_rep['measure'] == measure.value)]
            values = _metric_values(sub, truth_value, len(failures.get(strategy.value, {})),
                                    strategy, measure, notes)
            for row in block:
                row[strategy.value] = values.get(row['metric'])

    metrics = pd.DataFrame(table, columns=['measure', 'metric'] + [s.value for s in STRATEGY_ORDER])
    balance = _summarize_balance([row for r in records for row in r.balance])
    for name, failed in failures.items():
        if failed:
            logger.info(f"{config.label}: {name} failed in {len(failed)}/{config.reps} replications")
    return ReplicationSummary(config=config, truth=truth, metrics=metrics, per_rep=per_rep,
                              balance=balance, failures=failures, warnings=notes)


def _metric_values(sub: pd.DataFrame, truth_value: float, n_failed: int,
                   strategy: Strategy, measure: EffectMeasure, notes: list) -> Dict[str, float]:
    if sub.empty:
        return {'n_success': 0, 'n_failed': n_failed}
    estimates = sub['estimate'].to_numpy(dtype=float)
    values = {
        'bias': float(estimates.mean() - truth_value),
        'variance': float(sub['variance'].mean()),
        'coverage': float(sub['covers'].mean()),
        'n_success': int(len(sub)),
        'n_failed': n_failed,
        'mean_n': float(sub['n_used'].mean()),
    }
    for flavor in FLAVORS:
        column = sub[f"variance_{flavor.value}"].dropna()
        values[f"variance_{flavor.value}"] = float(column.mean()) if len(column) else None
    if len(sub) > 1:
        values['empirical_variance'] = float(estimates.var(ddof=1))
    else:
        msg = f"empirical variance undefined for {strategy.value} {measure.value} with one replication"
        logger.warning(msg)
        notes.append(msg)
    return values


def _summarize_balance(rows: List[dict]) -> pd.DataFrame:
    """Mean SDiff per (strategy, view, covariate) across replications, wide by covariate"""
    if not rows:
        return pd.DataFrame(columns=['strategy', 'view'])
    frame = pd.DataFrame(rows)
    covariates = list(dict.fromkeys(frame['covariate']))
    wide = frame.pivot_table(index=['strategy', 'view'], columns='covariate', values='sdiff',
                             aggfunc='mean', sort=False)
    wide = wide.reindex(columns=covariates).reset_index()
    wide.columns.name = None
    order = {s.value: i for i, s in enumerate(STRATEGY_ORDER)}
    wide['_order'] = wide['strategy'].map(order)
    return wide.sort_values('_order', kind='stable').drop(columns='_order').reset_index(drop=True)


# --- runner ---

@dataclass
class RunManifest:
    config: dict
    seed: int
    version: str
    started_at: str
    finished_at: Optional[str] = None
    workers: int = 1
    python: str = platform.python_version()
    failures: Dict[str, Dict[str, str]] = field(default_factory=dict)

    def to_json(self) -> bytes:
        return orjson.dumps(self.__dict__, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS)

    @classmethod
    def load(cls, path) -> 'RunManifest':
        try:
            data = orjson.loads(Path(path).read_bytes())
        except (FileNotFoundError, orjson.JSONDecodeError) as e:
            raise InputError(f"Cannot read manifest {path}: {e}") from e
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in data.items() if k in known})

    def scenario(self) -> ScenarioConfig:
        return ScenarioConfig.from_dict(self.config)


class ScenarioRunner:
    """Runs all replications of one scenario, in-process or on a process pool"""

    def __init__(self, config: ScenarioConfig, workers: int = None, progress: bool = True,
                 with_balance: bool = True):
        self.config = config.resolved()
        self.workers = Config.workers() if not workers else workers
        self.progress = progress
        self.with_balance = with_balance

    def __repr__(self):
        return f"<ScenarioRunner {self.config.label} reps={self.config.reps} workers={self.workers}>"

    def run(self):
        config = self.config
        started = datetime.now(timezone.utc).isoformat()
        logger.info(f"Starting {config.label}: n={config.n}, reps={config.reps}, M={config.M}, "
                    f"theta_c={config.theta_c:.4f}, gamma_0={config.gamma_0:.4f}")
        truth = truth_for(config)
        jobs = [(config, truth, rep, self.with_balance) for rep in range(config.reps)]

        if self.workers <= 1:
            records = [_run_one(job) for job in tqdm(jobs, desc=config.label, disable=not self.progress)]
        else:
            with ProcessPoolExecutor(max_workers=self.workers) as pool:
                records = list(tqdm(pool.map(_run_one, jobs, chunksize=max(1, len(jobs) // (self.workers * 4))),
                                    total=len(jobs), desc=config.label, disable=not self.progress))

        summary = summarize(config, truth, records)
        manifest = RunManifest(
            config=config.to_dict(), seed=config.seed, version=__version__, started_at=started,
            finished_at=datetime.now(timezone.utc).isoformat(), workers=self.workers,
            failures={name: {str(rep): reason for rep, reason in failed.items()}
                      for name, failed in summary.failures.items() if failed},
        )
        logger.info(f"Finished {config.label}")
        return summary, manifest


def run_scenario(config: ScenarioConfig, workers: int = None, progress: bool = False):
    """Run a scenario and return (ReplicationSummary, RunManifest)"""
    return ScenarioRunner(config, workers=workers, progress=progress).run()


# --- tables ---

def emit_tables(summary: ReplicationSummary, out_dir, manifest: RunManifest = None) -> Dict[str, Path]:
    """
    Write the results table, the balance grid and the per-replication estimates

    Missing cells are written as empty fields.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    label = summary.config.label
    paths = {
        'results': out / f"{label}_results.csv",
        'balance': out / f"{label}_balance.csv",
        'replications': out / f"{label}_replications.csv",
    }
    summary.metrics.to_csv(paths['results'], index=False, float_format='%.6f', na_rep='')
    summary.balance.to_csv(paths['balance'], index=False, float_format='%.6f', na_rep='')
    summary.per_rep.to_csv(paths['replications'], index=False, float_format='%.10g', na_rep='')
    if manifest is not None:
        paths['manifest'] = out / 'manifest.json'
        paths['manifest'].write_bytes(manifest.to_json())
    logger.info(f"Wrote {', '.join(str(p) for p in paths.values())}")
    return paths


def estimate_table(result: StrategyResult) -> pd.DataFrame:
    """RR, OR and RD with CIs (exponentiated for the ratio measures)"""
    rows = []
    for measure in MEASURES:
        est = result.estimates[measure]
        transform = (lambda v: v) if measure is EffectMeasure.RD else np.exp
        rows.append({
            'measure': measure.value, 'estimate': float(transform(est.estimate)),
            'ci_low': float(transform(est.ci_low)), 'ci_high': float(transform(est.ci_high)),
            'log_estimate': est.estimate if measure is not EffectMeasure.RD else None,
            'variance': est.variance, 'variance_flavor': est.variance_flavor.value,
            'mu1': est.mu1, 'mu0': est.mu0, 'n_used': result.n_used,
        })
    return pd.DataFrame(rows)


def analyze_file(dataset: Dataset, strategy: Strategy, imputation: ImputationConfig = None,
                 min_stratum: int = None, min_rows: int = None):
    """
    Run one strategy on user data

    Returns:
        (StrategyResult, estimate table, BalanceReport)

    Raises:
        InputError: strategy=Full (no pre-deletion data outside simulation)
        ParameterError: invalid imputation settings; these are caller errors and
            are not reported as a strategy failure
        StrategyFailure: the strategy (or its imputation step) could not produce estimates
    """
    if strategy is Strategy.FULL:
        raise InputError("The Full strategy needs pre-deletion data and is only available in simulation")
    imputation = imputation or ImputationConfig()
    imputations = None
    if strategy in MI_STRATEGIES:
        try:
            imputations = impute(dataset, imputation)
        except StrategyFailure as e:
            raise StrategyFailure(strategy.value, e.reason) from e
        result = {Strategy.MITE: analyze_mite, Strategy.MIPS: analyze_mips,
                  Strategy.MIPAR: analyze_mipar}[strategy](dataset, imputation, imputations=imputations)
    else:
        result = analyze(strategy, dataset, imputation, min_stratum=min_stratum, min_rows=min_rows)
    report = balance_views(result, dataset, imputations=imputations)
    return result, estimate_table(result), report
