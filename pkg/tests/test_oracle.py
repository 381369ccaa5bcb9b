from decimal import Decimal
from fractions import Fraction

import pytest

from services.oracle import (DiscreteWorld, brute_force_iptw_expectation, counterexample,
                             counterexample_world, mite_analog_expectation, pooled_parameter_rule,
                             pooled_score_rule, true_ps_rule)
from utils.errors import EstimationError, ParameterError


@pytest.fixture(scope='module')
def world():
    return counterexample_world()


class TestClosedForm:

    def test_published_quantities(self):
        result = counterexample()
        assert result.theta_true == Fraction(1, 2)
        assert result.e_expected_missing == Fraction(73, 82)
        assert result.xbar == Fraction(81, 82)
        assert float(result.mips_expectation) == pytest.approx(0.4645, abs=5e-5)
        assert float(result.mipar_ps_at_xbar) == pytest.approx(0.8951, abs=5e-5)
        assert float(result.mipar_expectation) == pytest.approx(0.4623, abs=5e-5)

    def test_rows(self):
        rows = dict(counterexample().as_rows())
        assert rows == {'theta_true': '0.5000', 'e_expected_missing': '0.8902',
                        'mips_expectation': '0.4645', 'mipar_ps_at_xbar': '0.8951',
                        'mipar_expectation': '0.4623'}

    def test_pooled_estimators_are_biased(self):
        result = counterexample()
        assert result.mips_expectation < result.theta_true
        assert result.mipar_expectation < Decimal('0.5')


class TestEnumeration:

    def test_world_is_normalized(self, world):
        assert sum(p for _, p in world.states()) == 1
        assert len(world.states()) == 16

    def test_observed_conditional(self, world):
        assert world.observed_conditional_x(1, 1) == Fraction(81, 82)

    def test_true_ps(self, world):
        assert world.true_ps(1) == Fraction(9, 10)
        assert world.true_ps(0) == Fraction(1, 10)
        assert isinstance(world.true_ps(Fraction(81, 82)), Decimal)

    def test_pooled_score_matches_closed_form(self, world):
        assert brute_force_iptw_expectation(world, pooled_score_rule) == counterexample().mips_expectation

    def test_pooled_parameter_matches_closed_form(self, world):
        brute = brute_force_iptw_expectation(world, pooled_parameter_rule)
        assert abs(brute - counterexample().mipar_expectation) < Decimal('1e-12')

    @pytest.mark.parametrize('normalized', [False, True])
    def test_true_scores_are_unbiased(self, world, normalized):
        assert brute_force_iptw_expectation(world, true_ps_rule, normalized=normalized) == Fraction(1, 2)

    def test_per_imputation_weighting_is_unbiased(self, world):
        assert mite_analog_expectation(world) == Fraction(1, 2)


class TestWorldValidation:

    def test_probabilities_must_sum_to_one(self):
        with pytest.raises(ParameterError):
            DiscreteWorld({(0, 0, 0, 0): Fraction(1, 2), (1, 0, 0, 0): Fraction(1, 3)})

    def test_negative_probability(self):
        with pytest.raises(ParameterError):
            DiscreteWorld({(0, 0, 0, 0): Fraction(3, 2), (1, 0, 0, 0): Fraction(-1, 2)})

    def test_no_treated_mass(self):
        untreated = DiscreteWorld({(0, 0, 1, 0): Fraction(1, 2), (1, 0, 0, 0): Fraction(1, 2)})
        with pytest.raises(EstimationError):
            brute_force_iptw_expectation(untreated, true_ps_rule)

    def test_no_observed_rows_to_impute_from(self):
        all_missing = DiscreteWorld({(1, 1, 1, 1): Fraction(1)})
        with pytest.raises(EstimationError):
            brute_force_iptw_expectation(all_missing, pooled_score_rule)
