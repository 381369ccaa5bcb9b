"""
IPTW with partially observed confounders
Main command-line entry point
"""
import argparse
import sys
from typing import List, Optional

import pandas as pd

from config import Config, get_config
from csv_ingest import read_dataset
from services.balance import BalanceReport
from services.harness import RunManifest, ScenarioRunner, analyze_file, emit_tables
from services.mice import ImputationConfig
from services.numstat import RngStream
from services.oracle import counterexample
from services.simgen import (ScenarioConfig, Variant, calibrate_theta_c, load_scenario, scenario,
                             solve_gamma0, truth_for)
from services.strategies import Strategy
from utils.errors import IPTWError
from utils.logger import setup_logger

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_FAILURE = 3

logger = None


def _add_data_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--data', required=True, help='CSV file ("NA" or empty fields are missing)')
    parser.add_argument('--strategy', required=True, help='CC, MP, MIte, MIps or MIpar (Crude also accepted)')
    parser.add_argument('--outcome', required=True, help='binary outcome column')
    parser.add_argument('--treatment', required=True, help='binary treatment column')
    parser.add_argument('--covariates', required=True, help='comma-separated covariate columns')
    parser.add_argument('--m', type=int, default=Config.M,
                        help='number of imputations, at least 2 (invalid imputation settings exit with code 2)')
    parser.add_argument('--cycles', type=int, default=Config.CYCLES, help='chained-equation sweeps, at least 1')
    parser.add_argument('--no-outcome-in-imputation', action='store_true',
                        help='leave the outcome out of the imputation models')
    parser.add_argument('--pmm', action='store_true', help='predictive mean matching for continuous columns')
    parser.add_argument('--min-stratum', type=int, default=Config.MIN_STRATUM,
                        help='minimum rows per missingness-pattern stratum')
    parser.add_argument('--seed', type=int, default=Config.SEED)


def create_parser() -> argparse.ArgumentParser:
    """
    Build the command-line parser

    Returns:
        Parser with the simulate, analyze, balance, counterexample and calibrate subcommands
    """
    parser = argparse.ArgumentParser(prog='iptw-mi',
                                     description='IPTW causal effects with partially observed confounders')
    parser.add_argument('--env', default=None, help='configuration profile (development, production, testing)')
    parser.add_argument('--log-level', default=None)
    sub = parser.add_subparsers(dest='command', required=True)

    sim = sub.add_parser('simulate', help='run a simulation scenario')
    source = sim.add_mutually_exclusive_group(required=True)
    source.add_argument('--config', help='scenario JSON document')
    source.add_argument('--scenario', type=int, help='catalogue scenario number (1-16)')
    source.add_argument('--manifest', help='rerun the scenario recorded in a manifest.json')
    sim.add_argument('--variant', default=Variant.BASE.value, choices=[v.value for v in Variant])
    sim.add_argument('--reps', type=int, default=None)
    sim.add_argument('--seed', type=int, default=None)
    sim.add_argument('--out', required=True, help='output directory for the CSV tables')
    sim.add_argument('--workers', type=int, default=None, help='parallel processes (default: all cores)')
    sim.add_argument('--no-balance', action='store_true', help='skip balance diagnostics')
    sim.add_argument('--no-progress', action='store_true')

    analyze = sub.add_parser('analyze', help='estimate RR, OR and RD on a data file')
    _add_data_arguments(analyze)

    balance = sub.add_parser('balance', help='balance grid on a data file under one strategy')
    _add_data_arguments(balance)

    sub.add_parser('counterexample', help='exact pooled-PS counter-example quantities')

    cal = sub.add_parser('calibrate', help='theta_c, gamma_0 and true marginal effects')
    cal.add_argument('--rho', type=float, required=True)
    cal.add_argument('--rr', type=float, default=2.0)
    cal.add_argument('--gamma-y', type=float, default=-0.4)
    cal.add_argument('--rate', type=float, default=0.30, help='target missing rate')
    cal.add_argument('--draws', type=int, default=Config.CALIBRATION_DRAWS)
    cal.add_argument('--seed', type=int, default=Config.SEED)
    return parser


# --- commands ---

def _scenario_from_args(args) -> ScenarioConfig:
    if args.manifest:
        return RunManifest.load(args.manifest).scenario()
    if args.config:
        config = load_scenario(args.config)
        if args.variant != Variant.BASE.value:
            config = config.with_variant(Variant(args.variant))
    else:
        config = scenario(args.scenario, Variant(args.variant))
    overrides = {}
    if args.reps is not None:
        overrides['reps'] = args.reps
    if args.seed is not None:
        overrides['seed'] = args.seed
    return ScenarioConfig.from_dict({**config.to_dict(), **overrides}) if overrides else config


def cmd_simulate(args) -> int:
    config = _scenario_from_args(args)
    runner = ScenarioRunner(config, workers=args.workers, progress=not args.no_progress,
                            with_balance=not args.no_balance)
    summary, manifest = runner.run()
    emit_tables(summary, args.out, manifest)

    shares = summary.failure_share()
    over = {name: share for name, share in shares.items() if share > Config.FAILURE_THRESHOLD}
    if over:
        for name, share in over.items():
            logger.error(f"{name} failed in {share:.1%} of replications (threshold {Config.FAILURE_THRESHOLD:.0%})")
        return EXIT_FAILURE
    return EXIT_OK


def _imputation_config(args) -> ImputationConfig:
    return ImputationConfig(M=args.m, cycles=args.cycles,
                            include_outcome=not args.no_outcome_in_imputation,
                            rng=RngStream(args.seed), pmm=args.pmm)


def _run_file(args):
    imputation = _imputation_config(args)
    covariates = [c.strip() for c in args.covariates.split(',') if c.strip()]
    dataset = read_dataset(args.data, args.outcome, args.treatment, covariates)
    strategy = Strategy.parse(args.strategy)
    return analyze_file(dataset, strategy, imputation, min_stratum=args.min_stratum)


def _print_balance(report: BalanceReport) -> None:
    frame = report.as_frame()
    print(frame.to_string(index=False, float_format=lambda v: f"{v:.1f}", na_rep='NA'))


def cmd_analyze(args) -> int:
    result, table, report = _run_file(args)
    print(f"strategy: {result.strategy.value}  n used: {result.n_used}")
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}", na_rep=''))
    print()
    _print_balance(report)
    for note in dict.fromkeys(result.warnings):
        print(f"warning: {note}")
    return EXIT_OK


def cmd_balance(args) -> int:
    _, _, report = _run_file(args)
    _print_balance(report)
    return EXIT_OK


def cmd_counterexample(args) -> int:
    rows = counterexample().as_rows()
    print(pd.DataFrame(rows, columns=['quantity', 'value']).to_string(index=False))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    theta_c = calibrate_theta_c(args.rho, args.rr, RngStream(args.seed, 1), n_mc=args.draws)
    gamma_0 = solve_gamma0(args.rate, args.gamma_y, args.rho, theta_c, RngStream(args.seed, 2),
                           n_mc=min(args.draws, Config.GAMMA0_DRAWS))
    config = ScenarioConfig(rho=args.rho, target_rr=args.rr, gamma_y=args.gamma_y, theta_c=theta_c,
                            gamma_0=gamma_0, missing_rate_target=args.rate, seed=args.seed)
    truth = truth_for(config, n_mc=args.draws)
    rows = [('theta_c', theta_c), ('gamma_0', gamma_0), ('mu1', truth.mu1), ('mu0', truth.mu0),
            ('log_rr', truth.log_rr), ('log_or', truth.log_or), ('rd', truth.rd)]
    print(pd.DataFrame(rows, columns=['quantity', 'value']).to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return EXIT_OK


COMMANDS = {
    'simulate': cmd_simulate,
    'analyze': cmd_analyze,
    'balance': cmd_balance,
    'counterexample': cmd_counterexample,
    'calibrate': cmd_calibrate,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run the command and map errors to exit codes"""
    global logger
    parser = create_parser()
    args = parser.parse_args(argv)

    profile = get_config(args.env)
    logger = setup_logger(__name__, args.log_level or profile.LOG_LEVEL)
    try:
        profile.validate_config()
    except ValueError as e:
        logger.error(str(e))
        return EXIT_INPUT

    try:
        return COMMANDS[args.command](args)
    except IPTWError as e:
        logger.error(str(e))
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return EXIT_INPUT


if __name__ == '__main__':
    sys.exit(main())
