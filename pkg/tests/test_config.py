# test_config.py - Profiles, environment overrides and JSON config files
import pytest
import ujson

from config import (
    Config, ConfigurationError, DevelopmentConfig, LRSchedule, ModelConfig, ProductionConfig,
    QuantizationConfig, TestingConfig, get_config,
)


def test_get_config_selects_profile(monkeypatch):
    monkeypatch.setenv("ECP_ENV", "testing")
    assert isinstance(get_config(), TestingConfig)
    monkeypatch.setenv("ECP_ENV", "production")
    assert isinstance(get_config(), ProductionConfig)
    monkeypatch.delenv("ECP_ENV")
    assert isinstance(get_config(), DevelopmentConfig)


def test_testing_profile_is_desk_scale():
    config = TestingConfig()
    assert config.CACHE_DB_PATH == ":memory:"
    assert config.model.d == 32
    assert config.model.K == 8
    assert config.training.epochs == 4
    assert config.schedule.stop_epoch == 4
    # profiles never leak into the base class
    assert Config().model.d == 256


def test_environment_overrides(monkeypatch):
    monkeypatch.setenv("ECP_SEED", "17")
    monkeypatch.setenv("ECP_TOP_K", "3")
    monkeypatch.setenv("ECP_LOG_LEVEL", "warning")
    config = Config()
    assert config.SEED == 17
    assert config.TOP_K == 3
    assert config.LOG_LEVEL == "WARNING"


def test_invalid_environment_value_keeps_default(monkeypatch):
    monkeypatch.setenv("ECP_WORKER_COUNT", "many")
    assert Config().WORKER_COUNT == 4


def test_from_file_applies_nested_overrides(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(ujson.dumps({"WINDOW": 64, "model": {"K": 16}, "schedule": {"stop_epoch": 50}}))
    config = Config.from_file(str(path), base=TestingConfig())
    assert config.WINDOW == 64
    assert config.model.K == 16
    assert config.model.d == 32
    assert config.schedule.stop_epoch == 50


def test_unknown_key_is_rejected(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(ujson.dumps({"model": {"layers": 3}}))
    with pytest.raises(ConfigurationError, match="unknown config key: model.layers"):
        Config.from_file(str(path), base=TestingConfig())
    with pytest.raises(ConfigurationError, match="unknown config key: WINDOWS"):
        TestingConfig().apply_overrides({"WINDOWS": 3})


def test_missing_config_file():
    with pytest.raises(FileNotFoundError):
        Config.from_file("does/not/exist.json")


@pytest.mark.parametrize("overrides", [
    {"WINDOW": 16, "STRIDE": 16},
    {"TEST_FRACTION": 0.0},
    {"TOP_K": 0},
    {"model": {"d": 30, "heads": 4}},
    {"model": {"dropout": 1.0}},
    {"quantization": {"timing_bins": 40}},
    {"schedule": {"warmup_epochs": 20, "decay_end_epoch": 10}},
])
def test_validate_rejects_out_of_domain_values(overrides):
    with pytest.raises(ConfigurationError):
        TestingConfig().apply_overrides(overrides).validate()


def test_quantization_config_rejects_bad_ranges():
    with pytest.raises(ConfigurationError):
        QuantizationConfig(beat_period_min=2.0, beat_period_max=1.0).validate()


def test_model_config_defaults_are_valid():
    ModelConfig().validate()


def test_schedule_scaled_keeps_shape():
    scaled = LRSchedule().scaled(20)
    assert scaled.warmup_epochs == pytest.approx(1.0)
    assert scaled.decay_end_epoch == pytest.approx(10.0)
    assert scaled.peak_lr == LRSchedule().peak_lr
    assert scaled.stop_epoch == 20


def test_to_dict_round_trips_sections():
    data = TestingConfig().to_dict()
    assert data["model"]["d"] == 32
    assert data["quantization"]["beat_resolution"] == 24
