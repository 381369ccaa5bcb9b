import numpy as np
import pytest

from app import EXIT_FAILURE, EXIT_INPUT, EXIT_OK, create_parser, main
from csv_ingest import write_dataset


@pytest.fixture
def data_csv(tmp_path, observed_data):
    path = tmp_path / 'observed.csv'
    write_dataset(observed_data, path)
    return path


def _data_args(path, strategy):
    return ['--data', str(path), '--strategy', strategy, '--outcome', 'Y', '--treatment', 'Z',
            '--covariates', 'X1,X2,X3']


class TestParser:

    def test_simulate_sources_are_exclusive(self):
        with pytest.raises(SystemExit):
            create_parser().parse_args(['simulate', '--scenario', '7', '--config', 'x.json', '--out', 'o'])

    def test_defaults(self):
        args = create_parser().parse_args(['analyze', *_data_args('d.csv', 'CC')])
        assert args.m == 10
        assert not args.no_outcome_in_imputation


def test_counterexample(capsys):
    assert main(['counterexample']) == EXIT_OK
    out = capsys.readouterr().out
    assert '0.4645' in out
    assert '0.8951' in out


def test_analyze_complete_cases(capsys, data_csv):
    assert main(['analyze', *_data_args(data_csv, 'CC')]) == EXIT_OK
    out = capsys.readouterr().out
    assert 'strategy: CC' in out
    for measure in ('RR', 'OR', 'RD'):
        assert measure in out


def test_balance_command(capsys, data_csv):
    assert main(['balance', *_data_args(data_csv, 'MP')]) == EXIT_OK
    assert 'observed_part' in capsys.readouterr().out


def test_analyze_imputation_strategy(capsys, data_csv):
    args = ['analyze', *_data_args(data_csv, 'MIte'), '--m', '2', '--cycles', '2', '--seed', '3']
    assert main(args) == EXIT_OK
    assert 'strategy: MIte' in capsys.readouterr().out


def test_full_strategy_is_input_error(data_csv):
    assert main(['analyze', *_data_args(data_csv, 'Full')]) == EXIT_INPUT


def test_unknown_strategy(data_csv):
    assert main(['analyze', *_data_args(data_csv, 'IPW')]) == EXIT_INPUT


def test_single_imputation_is_input_error(capsys, data_csv):
    assert main(['analyze', *_data_args(data_csv, 'MIte'), '--m', '1']) == EXIT_INPUT
    assert 'strategy:' not in capsys.readouterr().out


def test_missing_data_file(tmp_path):
    assert main(['analyze', *_data_args(tmp_path / 'nope.csv', 'CC')]) == EXIT_INPUT


def test_strategy_failure_exit_code(tmp_path):
    gen = np.random.default_rng(0)
    rows = ['a,z,y'] + [f"{gen.standard_normal():.4f},1,{int(gen.random() < 0.5)}" for _ in range(30)]
    path = tmp_path / 'treated_only.csv'
    path.write_text('\n'.join(rows) + '\n')
    args = ['analyze', '--data', str(path), '--strategy', 'CC', '--outcome', 'y', '--treatment', 'z',
            '--covariates', 'a']
    assert main(args) == EXIT_FAILURE


def test_calibrate(capsys):
    assert main(['calibrate', '--rho', '0.3', '--rr', '2', '--gamma-y', '0', '--draws', '100000']) == EXIT_OK
    out = capsys.readouterr().out
    assert 'theta_c' in out
    assert 'gamma_0' in out


def test_simulate_writes_tables(tmp_path):
    config = tmp_path / 'small.json'
    config.write_text('{"rho": 0.6, "target_rr": 2.0, "gamma_y": -0.4, "n": 600, "M": 2, "reps": 2, '
                      '"seed": 4, "name": "small"}')
    out = tmp_path / 'out'
    code = main(['simulate', '--config', str(config), '--out', str(out), '--workers', '1', '--no-progress'])
    assert code in (EXIT_OK, EXIT_FAILURE)
    assert (out / 'small_results.csv').exists()
    assert (out / 'manifest.json').exists()

    rerun = tmp_path / 'rerun'
    code = main(['simulate', '--manifest', str(out / 'manifest.json'), '--out', str(rerun), '--workers', '1',
                 '--no-progress', '--no-balance'])
    assert code in (EXIT_OK, EXIT_FAILURE)
    assert (rerun / 'small_results.csv').read_bytes() == (out / 'small_results.csv').read_bytes()


def test_invalid_scenario_document(tmp_path):
    config = tmp_path / 'bad.json'
    config.write_text('{"rho": 0.6, "target_rr": 0.5, "gamma_y": 0}')
    assert main(['simulate', '--config', str(config), '--out', str(tmp_path)]) == EXIT_INPUT
