from pathlib import Path

import numpy as np
import pytest
from scipy.special import expit

from services.numstat import RngStream
from services.simgen import (PUBLISHED_THETA_C, TREATMENT_COEF, ScenarioConfig, Variant,
                             calibrate_theta_c, dump_scenario, generate, load_scenario, scenario,
                             solve_gamma0, truth_for)
from utils.errors import InputError, ParameterError

SCENARIO_DIR = Path(__file__).resolve().parent.parent / 'scenarios'


@pytest.fixture(scope='module')
def large_pair():
    return generate(scenario(7, n=200_000), RngStream(99))


class TestCatalogue:

    @pytest.mark.parametrize('number, rho, rr, gamma_y, include', [
        (1, 0.3, 1.0, -0.4, True),
        (2, 0.3, 1.0, 0.0, True),
        (3, 0.3, 2.0, -0.4, True),
        (7, 0.6, 2.0, -0.4, True),
        (8, 0.6, 2.0, 0.0, True),
        (15, 0.6, 2.0, -0.4, False),
        (16, 0.6, 2.0, 0.0, False),
    ])
    def test_numbering(self, number, rho, rr, gamma_y, include):
        config = scenario(number)
        assert (config.rho, config.target_rr, config.gamma_y, config.include_outcome) == \
            (rho, rr, gamma_y, include)

    @pytest.mark.parametrize('number', [0, 17])
    def test_out_of_range(self, number):
        with pytest.raises(ParameterError):
            scenario(number)

    def test_variant_overrides(self):
        assert scenario(7, Variant.N_500).n == 500
        assert scenario(7, Variant.M_20).M == 20
        rate = scenario(7, Variant.RATE_10)
        assert rate.missing_rate_target == 0.10
        assert rate.label == 'scenario7_rate_10'

    def test_published_calibration(self):
        resolved = scenario(7).resolved()
        assert resolved.theta_c == PUBLISHED_THETA_C[(0.6, 2.0)]
        assert resolved.gamma_0 == -1.3
        assert scenario(4).resolved().gamma_0 == -1.5
        assert scenario(1).resolved().theta_c == 0.0


class TestScenarioDocuments:

    @pytest.mark.parametrize('path', sorted(SCENARIO_DIR.glob('*.json')), ids=lambda p: p.stem)
    def test_catalogue_files_load(self, path):
        config = load_scenario(path)
        assert config.number is not None
        assert config.reps >= 1

    def test_variant_file_takes_variant_sizes(self):
        config = load_scenario(SCENARIO_DIR / 'scenario07_n_500.json')
        assert config.n == 500
        assert config.variant is Variant.N_500

    def test_explicit_keys_win(self):
        config = ScenarioConfig.from_dict({'rho': 0.3, 'target_rr': 2, 'gamma_y': 0, 'variant': 'M_5', 'M': 7})
        assert config.M == 7

    def test_unknown_key(self):
        with pytest.raises(InputError):
            ScenarioConfig.from_dict({'rho': 0.3, 'target_rr': 2.0, 'gamma_y': 0.0, 'size': 5})

    @pytest.mark.parametrize('patch', [{'rho': 1.2}, {'n': 5}, {'M': 1}, {'include_outcome': 'yes'},
                                       {'variant': 'HUGE'}, {'reps': 2.5}])
    def test_invalid_values(self, patch):
        with pytest.raises(InputError):
            ScenarioConfig.from_dict({'rho': 0.3, 'target_rr': 2.0, 'gamma_y': 0.0, **patch})

    def test_dump_and_load(self, tmp_path):
        config = scenario(11, seed=5, reps=20)
        path = tmp_path / 'scenario.json'
        dump_scenario(config, path)
        assert load_scenario(path) == config

    def test_malformed_file(self, tmp_path):
        path = tmp_path / 'broken.json'
        path.write_text('{"rho": ')
        with pytest.raises(InputError):
            load_scenario(path)


class TestGenerate:

    def test_observed_cells_agree(self, full_data, observed_data):
        observed = ~observed_data.mask.to_numpy()
        assert np.array_equal(full_data.frame.to_numpy()[observed], observed_data.frame.to_numpy()[observed])
        assert not full_data.mask.to_numpy().any()
        assert observed_data.partially_observed() == ['X1', 'X3']

    def test_binary_confounder(self, full_data):
        assert set(np.unique(full_data.frame['X3'])) == {0.0, 1.0}

    def test_reproducible(self):
        a = generate(scenario(3, n=300), RngStream(1, 2))[1]
        b = generate(scenario(3, n=300), RngStream(1, 2))[1]
        assert a.frame.equals(b.frame)

    def test_treatment_model(self, large_pair):
        full = large_pair[0]
        x = full.covariate_matrix()
        expected = expit(TREATMENT_COEF[0] + x @ np.asarray(TREATMENT_COEF[1:])).mean()
        assert abs(full.z.mean() - expected) < 0.005

    def test_missing_rate(self, large_pair):
        rates = large_pair[1].mask.mean()
        assert abs(rates['X1'] - 0.30) < 0.03
        assert abs(rates['X3'] - 0.30) < 0.03
        assert rates['X2'] == 0.0

    def test_missingness_depends_on_treatment(self, large_pair):
        full, observed = large_pair
        miss = observed.mask['X1'].to_numpy()
        assert miss[full.z == 1].mean() > miss[full.z == 0].mean()

    def test_masks_independent_given_predictors(self, large_pair):
        full, observed = large_pair
        config = scenario(7, n=200_000).resolved()
        x2 = full.frame['X2'].to_numpy()
        p = expit(config.gamma_0 + full.z + x2 + config.gamma_y * full.y)
        r1 = observed.mask['X1'].to_numpy().astype(float)
        r3 = observed.mask['X3'].to_numpy().astype(float)
        assert abs(np.mean(r1 * r3) - np.mean(p ** 2)) < 0.005
        assert abs(np.corrcoef(r1 - p, r3 - p)[0, 1]) < 0.015

    def test_outcome_and_treatment_mcar_variant(self):
        _, observed = generate(scenario(7, Variant.MISS_YZ_MCAR, n=20_000), RngStream(4))
        rates = observed.mask.mean()
        assert abs(rates['Y'] - 0.30) < 0.02
        assert abs(rates['Z'] - 0.30) < 0.02


class TestCalibration:

    def test_null_effect(self):
        assert calibrate_theta_c(0.3, 1.0, RngStream(1)) == 0.0
        truth = truth_for(scenario(2), n_mc=100_000)
        assert truth.log_rr == truth.log_or == truth.rd == 0.0

    def test_theta_reaches_target(self):
        theta = calibrate_theta_c(0.3, 2.0, RngStream(2), n_mc=200_000)
        assert 1.1 < theta < 1.35
        config = ScenarioConfig(rho=0.3, target_rr=2.0, gamma_y=0.0, theta_c=theta, gamma_0=-1.5)
        truth = truth_for(config, n_mc=200_000)
        assert np.exp(truth.log_rr) == pytest.approx(2.0, abs=0.02)
        assert truth.rd == pytest.approx(truth.mu1 - truth.mu0)

    def test_unreachable_target(self):
        with pytest.raises(ParameterError):
            calibrate_theta_c(0.3, 50.0, RngStream(3), n_mc=10_000)

    def test_gamma0_monotone_in_rate(self):
        low = solve_gamma0(0.10, -0.4, 0.6, 1.289, RngStream(5), n_mc=100_000)
        high = solve_gamma0(0.60, -0.4, 0.6, 1.289, RngStream(5), n_mc=100_000)
        assert low < high

    def test_gamma0_self_consistent(self):
        gamma_0 = solve_gamma0(0.10, 0.0, 0.3, 1.221, RngStream(6), n_mc=200_000)
        config = ScenarioConfig(rho=0.3, target_rr=2.0, gamma_y=0.0, theta_c=1.221, gamma_0=gamma_0,
                                missing_rate_target=0.10, n=100_000)
        _, observed = generate(config, RngStream(7))
        assert abs(observed.mask['X1'].mean() - 0.10) < 0.01

    @pytest.mark.parametrize('rate', [0.0, 1.0, 1 - 1e-12])
    def test_gamma0_bad_target(self, rate):
        with pytest.raises(ParameterError):
            solve_gamma0(rate, 0.0, 0.3, 1.221, RngStream(8), n_mc=10_000)

    @pytest.mark.slow
    @pytest.mark.parametrize('rho, theta, odds_ratio, rd', [(0.3, 1.221, 2.894, 0.236),
                                                            (0.6, 1.289, 2.949, 0.243)])
    def test_published_values(self, rho, theta, odds_ratio, rd):
        calibrated = calibrate_theta_c(rho, 2.0, RngStream(11), n_mc=10_000_000)
        assert calibrated == pytest.approx(theta, abs=0.01)
        config = ScenarioConfig(rho=rho, target_rr=2.0, gamma_y=0.0, theta_c=theta, gamma_0=-1.5)
        truth = truth_for(config, n_mc=10_000_000)
        assert np.exp(truth.log_or) == pytest.approx(odds_ratio, abs=0.02)
        assert truth.rd == pytest.approx(rd, abs=0.005)
