"""
Validation utilities for scenario documents and dataset column roles
"""
from typing import Any, Dict, Iterable, Sequence

from utils.errors import InputError

SCENARIO_FIELDS = {
    'name', 'number', 'n', 'rho', 'target_rr', 'theta_c', 'gamma_y', 'gamma_0',
    'missing_rate_target', 'include_outcome', 'M', 'reps', 'seed', 'variant',
}
VARIANTS = ('BASE', 'MISS_YZ_MCAR', 'RATE_10', 'RATE_60', 'N_500', 'M_5', 'M_20')


def _number(data: Dict[str, Any], key: str, allow_none: bool = False) -> None:
    value = data.get(key)
    if value is None and allow_none:
        return
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise InputError(f"{key} must be a number", column=key)


def _integer(data: Dict[str, Any], key: str, minimum: int) -> None:
    value = data.get(key)
    if isinstance(value, bool) or not isinstance(value, int):
        raise InputError(f"{key} must be an integer", column=key)
    if value < minimum:
        raise InputError(f"{key} must be at least {minimum}", column=key)


def validate_scenario(data: Dict[str, Any]) -> None:
    """
    Validate a scenario document (the JSON form of a ScenarioConfig)

    Args:
        data: The parsed scenario document

    Raises:
        InputError: If validation fails
    """
    if not isinstance(data, dict):
        raise InputError("Scenario must be a JSON object")

    unknown = sorted(set(data) - SCENARIO_FIELDS)
    if unknown:
        raise InputError(f"Unknown scenario keys: {', '.join(unknown)}")

    for field in ('rho', 'target_rr', 'gamma_y'):
        if field not in data:
            raise InputError(f"Missing required field: {field}", column=field)
        _number(data, field)

    if not 0.0 <= data['rho'] < 1.0:
        raise InputError("rho must lie in [0, 1)", column='rho')
    if data['target_rr'] < 1.0:
        raise InputError("target_rr must be at least 1", column='target_rr')

    for field in ('theta_c', 'gamma_0'):
        if field in data:
            _number(data, field, allow_none=True)

    if 'missing_rate_target' in data:
        _number(data, 'missing_rate_target')
        if not 0.0 < data['missing_rate_target'] < 1.0:
            raise InputError("missing_rate_target must lie in (0, 1)", column='missing_rate_target')

    for field, minimum in (('n', 10), ('M', 2), ('reps', 1), ('seed', 0)):
        if field in data:
            _integer(data, field, minimum)

    if 'include_outcome' in data and not isinstance(data['include_outcome'], bool):
        raise InputError("include_outcome must be true or false", column='include_outcome')

    if 'variant' in data and data['variant'] not in VARIANTS:
        raise InputError(f"variant must be one of {', '.join(VARIANTS)}", column='variant')

    if 'number' in data and data['number'] is not None:
        _integer(data, 'number', 1)


def validate_roles(columns: Iterable[str], outcome: str, treatment: str,
                   covariates: Sequence[str]) -> None:
    """
    Check that the declared outcome, treatment and covariates exist and do not overlap

    Raises:
        InputError: If a role names an unknown column or a column is used twice
    """
    available = list(columns)
    if not covariates:
        raise InputError("At least one covariate is required")

    declared = [outcome, treatment, *covariates]
    for name in declared:
        if not isinstance(name, str) or not name.strip():
            raise InputError("Column names cannot be empty")
        if name not in available:
            raise InputError(f"Unknown column {name!r}; file has {', '.join(available)}", column=name)

    duplicates = sorted({name for name in declared if declared.count(name) > 1})
    if duplicates:
        raise InputError(f"Columns assigned to more than one role: {', '.join(duplicates)}")
