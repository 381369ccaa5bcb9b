#!/usr/bin/env python3
"""
CSV Dataset Ingestion
Reads an outcome / treatment / covariate table into a Dataset, with "NA" or
empty fields as missing cells
"""

import argparse
import sys
from pathlib import Path
from typing import Dict, Sequence

import numpy as np
import pandas as pd

from services.mice import ColumnKind, Dataset, missingness_summary
from utils.errors import InputError, ParameterError
from utils.logger import setup_logger
from utils.validators import validate_roles

NA_VALUES = ('NA', '')


def _first_bad_cell(raw: pd.Series) -> int:
    numeric = pd.to_numeric(raw, errors='coerce')
    bad = numeric.isna() & raw.notna()
    return int(np.flatnonzero(bad.to_numpy())[0])


def read_dataset(path, outcome: str, treatment: str, covariates: Sequence[str],
                 kinds: Dict[str, ColumnKind] = None) -> Dataset:
    """
    Load a CSV file and assign column roles

    Args:
        path: CSV file with a header row
        outcome, treatment: binary (0/1) columns
        covariates: covariate columns; kinds inferred (0/1 -> binary) unless given

    Raises:
        InputError: unreadable file, unknown columns, non-numeric or non-binary
            cells, all-missing columns (row numbers count data rows from 1)
    """
    path = Path(path)
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, na_values=list(NA_VALUES))
    except FileNotFoundError as e:
        raise InputError(f"Data file not found: {path}") from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise InputError(f"Malformed CSV {path}: {e}") from e

    raw.columns = [c.strip() for c in raw.columns]
    covariates = list(covariates)
    validate_roles(raw.columns, outcome, treatment, covariates)

    data = {}
    for name in [*covariates, treatment, outcome]:
        column = raw[name].str.strip().replace({value: np.nan for value in NA_VALUES})
        numeric = pd.to_numeric(column, errors='coerce')
        if (numeric.isna() & column.notna()).any():
            row = _first_bad_cell(column)
            raise InputError(f"Non-numeric value {column.iloc[row]!r}", row=row + 1, column=name)
        if numeric.isna().all():
            raise InputError("Column has no observed values", column=name)
        data[name] = numeric.to_numpy(dtype=float)

    for name in (outcome, treatment):
        values = data[name]
        bad = ~np.isnan(values) & ~np.isin(values, (0.0, 1.0))
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise InputError(f"Binary column holds {values[row]:g}", row=row + 1, column=name)

    try:
        dataset = Dataset.from_arrays(data[outcome], data[treatment], {c: data[c] for c in covariates},
                                      kinds=kinds, outcome=outcome, treatment=treatment)
    except ParameterError as e:
        raise InputError(str(e)) from e
    return dataset


def write_dataset(dataset: Dataset, path) -> None:
    """Write a dataset back to CSV with empty fields for missing cells"""
    dataset.frame.to_csv(path, index=False, na_rep='', float_format='%.10g')


def main():
    ap = argparse.ArgumentParser(description="Inspect a dataset CSV: column roles and missingness")
    ap.add_argument("csv_path", help="Path to CSV with a header row")
    ap.add_argument("--outcome", required=True)
    ap.add_argument("--treatment", required=True)
    ap.add_argument("--covariates", required=True, help="Comma-separated covariate columns")
    args = ap.parse_args()

    logger = setup_logger(__name__)
    try:
        dataset = read_dataset(args.csv_path, args.outcome, args.treatment,
                               [c.strip() for c in args.covariates.split(',') if c.strip()])
    except InputError as e:
        logger.error(str(e))
        sys.exit(e.exit_code)

    summary = missingness_summary(dataset)
    print(f"rows: {dataset.n}")
    for name, rate in summary.rates.items():
        print(f"{name:>12}  {dataset.kinds[name].value:<10}  missing {rate:.3f}")
    print(summary.as_frame().to_string(index=False))


if __name__ == "__main__":
    main()
