"""
Configuration settings for the IPTW missing-confounder toolkit
"""
import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()


def _int(name: str, default: int) -> int:
    return int(os.getenv(name, str(default)))


def _float(name: str, default: float) -> float:
    return float(os.getenv(name, repr(default)))


class Config:
    """Base configuration class"""

    ENV = os.getenv('IPTW_ENV', 'production')

    # Randomness: every stream in a run derives from this seed
    SEED = _int('IPTW_SEED', 20170101)

    # Replication workers (0 means one per available core)
    WORKERS = _int('IPTW_WORKERS', 0)

    # Logistic IRLS
    IRLS_TOL = _float('IPTW_IRLS_TOL', 1e-8)
    IRLS_MAX_ITER = _int('IPTW_IRLS_MAX_ITER', 50)
    SEPARATION_BOUND = _float('IPTW_SEPARATION_BOUND', 15.0)

    # Multiple imputation
    M = _int('IPTW_M', 10)
    CYCLES = _int('IPTW_CYCLES', 10)
    IMPUTATION_RETRIES = _int('IPTW_IMPUTATION_RETRIES', 5)
    PMM_DONORS = _int('IPTW_PMM_DONORS', 5)

    # Strategies
    MIN_STRATUM = _int('IPTW_MIN_STRATUM', 50)
    MIN_CC_ROWS = _int('IPTW_MIN_CC_ROWS', 50)
    EXTREME_SCORE = _float('IPTW_EXTREME_SCORE', 1e-12)

    # Scenario calibration (Monte Carlo draws for theta_c, truths, gamma_0)
    CALIBRATION_DRAWS = _int('IPTW_CALIBRATION_DRAWS', 10_000_000)
    GAMMA0_DRAWS = _int('IPTW_GAMMA0_DRAWS', 1_000_000)

    # Share of failed replications (per strategy) above which simulate exits with code 3
    FAILURE_THRESHOLD = _float('IPTW_FAILURE_THRESHOLD', 0.10)

    # Logging Configuration
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
    LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

    @classmethod
    def validate_config(cls):
        """Validate that configured values are usable"""
        problems = []

        if cls.IRLS_TOL <= 0:
            problems.append('IPTW_IRLS_TOL must be positive')
        if cls.IRLS_MAX_ITER < 1:
            problems.append('IPTW_IRLS_MAX_ITER must be at least 1')
        if cls.SEPARATION_BOUND <= 0:
            problems.append('IPTW_SEPARATION_BOUND must be positive')
        if cls.M < 2:
            problems.append('IPTW_M must be at least 2')
        if cls.CYCLES < 1:
            problems.append('IPTW_CYCLES must be at least 1')
        if cls.WORKERS < 0:
            problems.append('IPTW_WORKERS must be 0 (auto) or positive')
        if not 0.0 <= cls.FAILURE_THRESHOLD <= 1.0:
            problems.append('IPTW_FAILURE_THRESHOLD must lie in [0, 1]')
        if cls.CALIBRATION_DRAWS < 1000:
            problems.append('IPTW_CALIBRATION_DRAWS must be at least 1000')

        if problems:
            raise ValueError(f"Invalid configuration: {'; '.join(problems)}")

        return True

    @classmethod
    def workers(cls) -> int:
        """Resolved worker count"""
        return cls.WORKERS or (os.cpu_count() or 1)


class DevelopmentConfig(Config):
    """Development configuration"""
    ENV = 'development'
    LOG_LEVEL = 'DEBUG'


class ProductionConfig(Config):
    """Production configuration"""
    ENV = 'production'


class TestingConfig(Config):
    """Testing configuration"""
    ENV = 'testing'
    WORKERS = 1
    CALIBRATION_DRAWS = 1_000_000
    GAMMA0_DRAWS = 400_000


# Configuration mapping
config = {
    'development': DevelopmentConfig,
    'production': ProductionConfig,
    'testing': TestingConfig,
    'default': ProductionConfig
}


def get_config(name: str = None):
    """Resolve a configuration profile by name (defaults to IPTW_ENV)"""
    return config.get(name or os.getenv('IPTW_ENV', 'default'), ProductionConfig)
