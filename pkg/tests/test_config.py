import pytest

from config import Config, DevelopmentConfig, ProductionConfig, TestingConfig, get_config


def test_profiles():
    assert get_config('development') is DevelopmentConfig
    assert get_config('testing') is TestingConfig
    assert get_config('unknown') is ProductionConfig


def test_default_profile_validates():
    assert Config.validate_config() is True


def test_invalid_settings(monkeypatch):
    monkeypatch.setattr(Config, 'M', 1)
    monkeypatch.setattr(Config, 'IRLS_TOL', 0.0)
    with pytest.raises(ValueError) as info:
        Config.validate_config()
    assert 'IPTW_M' in str(info.value)
    assert 'IPTW_IRLS_TOL' in str(info.value)


def test_worker_resolution(monkeypatch):
    monkeypatch.setattr(Config, 'WORKERS', 3)
    assert Config.workers() == 3
    monkeypatch.setattr(Config, 'WORKERS', 0)
    assert Config.workers() >= 1
