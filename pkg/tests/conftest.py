"""
Shared fixtures: seeded simulated datasets and small imputation settings
"""
import os
import sys

# Calibration sizes must be set before config is imported
os.environ.setdefault('IPTW_CALIBRATION_DRAWS', '1000000')
os.environ.setdefault('IPTW_GAMMA0_DRAWS', '400000')
os.environ.setdefault('IPTW_WORKERS', '1')
os.environ.setdefault('LOG_LEVEL', 'WARNING')

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from services.mice import Dataset, ImputationConfig  # noqa: E402
from services.numstat import RngStream  # noqa: E402
from services.simgen import generate, scenario  # noqa: E402


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False,
                     help='run the desk-scale Monte Carlo checks')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def stream():
    return RngStream(12345)


@pytest.fixture(scope='session')
def scenario7_pair():
    """(pre-deletion, post-deletion) datasets of one scenario-7 replication"""
    return generate(scenario(7), RngStream(20170101, stream_id=0).child(0))


@pytest.fixture
def full_data(scenario7_pair) -> Dataset:
    return scenario7_pair[0]


@pytest.fixture
def observed_data(scenario7_pair) -> Dataset:
    return scenario7_pair[1]


@pytest.fixture
def small_imputation():
    return ImputationConfig(M=3, cycles=3, rng=RngStream(777))


@pytest.fixture
def complete_dataset() -> Dataset:
    """Fully observed logistic-PS data with two continuous and one binary covariate"""
    gen = np.random.default_rng(2024)
    n = 1500
    x1 = gen.standard_normal(n)
    x2 = gen.standard_normal(n)
    x3 = (gen.random(n) < 0.5).astype(float)
    z = (gen.random(n) < 1 / (1 + np.exp(-(-0.5 + 0.6 * x1 + 0.4 * x2 + 0.5 * x3)))).astype(float)
    y = (gen.random(n) < 1 / (1 + np.exp(-(-1.0 + 0.5 * x1 + 0.3 * x2 + 0.2 * x3 + 0.7 * z)))).astype(float)
    return Dataset.from_arrays(y, z, {'X1': x1, 'X2': x2, 'X3': x3})
