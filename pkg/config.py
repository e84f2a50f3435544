# config.py - Pipeline configuration
import os
import copy
import logging
from dataclasses import dataclass, field, fields, asdict
from typing import Any, ClassVar, Dict, Optional

import ujson
from dotenv import load_dotenv

logger = logging.getLogger(__name__)

load_dotenv()


class ConfigurationError(ValueError):
    """Raised when a configuration value is out of its valid domain"""


@dataclass
class QuantizationConfig:
    """Ranges and bin counts of every ECP quantization table"""
    beat_period_min: float = 2.0 ** -4
    beat_period_max: float = 2.0 ** 4
    beat_period_bins: int = 161
    articulation_min: float = 2.0 ** -3
    articulation_max: float = 2.0 ** 3
    articulation_bins: int = 81
    timing_min: float = 1.0 / 96.0   # smallest non-zero |timing| in beats
    timing_max: float = 2.0
    timing_bins: int = 41
    velocity_bins: int = 32
    beat_resolution: int = 24
    default_beat_period: float = 0.5  # s/beat used when tempo cannot be estimated
    chord_spread_warn_sec: float = 0.1

    def validate(self):
        for name, lo, hi in (
            ("beat_period", self.beat_period_min, self.beat_period_max),
            ("articulation", self.articulation_min, self.articulation_max),
            ("timing", self.timing_min, self.timing_max),
        ):
            if not (0 < lo < hi):
                raise ConfigurationError(f"quantization.{name}: invalid range [{lo}, {hi}]")
        if self.timing_bins % 2 != 1 or self.timing_bins < 3:
            raise ConfigurationError("quantization.timing_bins must be odd and >= 3")
        for name in ("beat_period_bins", "articulation_bins", "velocity_bins", "beat_resolution"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"quantization.{name} must be positive")
        if self.default_beat_period <= 0:
            raise ConfigurationError("quantization.default_beat_period must be positive")


@dataclass
class ModelConfig:
    """XMVAE hyperparameters; vocabulary sizes come from the quantization spec"""
    d: int = 256
    d_z: int = 512
    K: int = 512
    encoder_layers: int = 6
    temporal_decoder_layers: int = 4
    subtoken_decoder_layers: int = 2
    heads: int = 8
    ffn_size: int = 1024
    dropout: float = 0.1
    alpha: float = 0.25
    ema_decay: float = 0.99
    ema_eps: float = 1e-5
    dead_code_threshold: float = 1e-3
    use_beat_attention: bool = True
    use_subtoken_decoder: bool = True
    use_pv: bool = True
    # prior
    prior_layers: int = 6
    prior_heads: int = 8
    prior_ffn_size: int = 1024

    def validate(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                continue
            if isinstance(value, (int, float)) and f.name != "dropout" and value <= 0:
                raise ConfigurationError(f"model.{f.name} must be positive, got {value}")
        if not 0 <= self.dropout < 1:
            raise ConfigurationError("model.dropout must be in [0, 1)")
        if self.d % self.heads != 0:
            raise ConfigurationError(f"model.d ({self.d}) must be divisible by model.heads ({self.heads})")
        if self.d % self.prior_heads != 0:
            raise ConfigurationError(f"model.d ({self.d}) must be divisible by model.prior_heads ({self.prior_heads})")
        if not 0 < self.ema_decay < 1:
            raise ConfigurationError("model.ema_decay must be in (0, 1)")


@dataclass
class LRSchedule:
    """Linear warmup, linear decay to a floor, hard stop"""
    warmup_epochs: float = 10
    peak_lr: float = 2e-4
    decay_end_epoch: float = 100
    floor_lr: float = 4e-5
    stop_epoch: float = 200

    def validate(self):
        if not (0 < self.warmup_epochs <= self.decay_end_epoch <= self.stop_epoch):
            raise ConfigurationError("schedule: need 0 < warmup_epochs <= decay_end_epoch <= stop_epoch")
        if self.peak_lr < 0 or self.floor_lr < 0:
            raise ConfigurationError("schedule: learning rates must be non-negative")

    def scaled(self, stop_epoch: float) -> "LRSchedule":
        """Same shape stretched or squeezed to a different stop epoch"""
        ratio = stop_epoch / self.stop_epoch
        return LRSchedule(
            warmup_epochs=self.warmup_epochs * ratio,
            peak_lr=self.peak_lr,
            decay_end_epoch=self.decay_end_epoch * ratio,
            floor_lr=self.floor_lr,
            stop_epoch=stop_epoch,
        )


@dataclass
class TrainingConfig:
    """Optimization settings shared by XMVAE, Composer pretraining and the prior"""
    epochs: int = 200
    batch_size: int = 16
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    grad_clip: float = 1.0
    beta: float = 0.2
    beta_anneal_epochs: int = 20
    valid_fraction: float = 0.05
    log_every_steps: int = 50
    reseed_pool_size: int = 4096   # encoder outputs kept per epoch for dead-code reseeding
    prior_epochs: int = 200
    prior_batch_size: int = 16

    def validate(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.prior_epochs <= 0 or self.prior_batch_size <= 0:
            raise ConfigurationError("training: epochs and batch sizes must be positive")
        if self.grad_clip <= 0:
            raise ConfigurationError("training.grad_clip must be positive")
        if not 0 <= self.valid_fraction < 1:
            raise ConfigurationError("training.valid_fraction must be in [0, 1)")
        if self.reseed_pool_size <= 0:
            raise ConfigurationError("training.reseed_pool_size must be positive")
        if self.beta < 0 or self.beta_anneal_epochs < 0:
            raise ConfigurationError("training.beta and beta_anneal_epochs must be non-negative")


_SECTIONS = {
    "quantization": QuantizationConfig,
    "model": ModelConfig,
    "training": TrainingConfig,
    "schedule": LRSchedule,
}


@dataclass
class Config:
    """Application configuration with environment variable support"""

    # Paths
    DATA_ROOT: str = "data"
    OUTPUT_DIR: str = "runs"
    CACHE_DB_PATH: str = "ecp_cache.db"

    # Runtime
    WORKER_COUNT: int = 4
    DEVICE: str = "auto"
    SEED: int = 0
    LOG_LEVEL: str = "INFO"

    # Segmentation and splitting
    WINDOW: int = 256
    STRIDE: int = 16
    TEST_FRACTION: float = 0.10
    MIN_ALIGNMENT_RATE: float = 0.0

    # Generation
    GENERATION_LENGTH: int = 512
    TOP_K: int = 8
    GENERATION_RETRIES: int = 3
    RENDER_OVERLAP: int = 32

    # Evaluation
    EVAL_SAMPLES: int = 1000

    quantization: QuantizationConfig = field(default_factory=QuantizationConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    schedule: LRSchedule = field(default_factory=LRSchedule)

    # Profile values applied before environment overrides
    PROFILE: ClassVar[Dict[str, Any]] = {}

    def __post_init__(self):
        """Apply the profile, then load configuration from environment variables"""
        self.apply_overrides(self._profile())

        self.DATA_ROOT = os.getenv("ECP_DATA_ROOT", self.DATA_ROOT)
        self.OUTPUT_DIR = os.getenv("ECP_OUTPUT_DIR", self.OUTPUT_DIR)
        self.CACHE_DB_PATH = os.getenv("ECP_CACHE_DB_PATH", self.CACHE_DB_PATH)
        self.DEVICE = os.getenv("ECP_DEVICE", self.DEVICE)
        self.LOG_LEVEL = os.getenv("ECP_LOG_LEVEL", self.LOG_LEVEL).upper()

        # Convert string env vars to appropriate types
        try:
            self.WORKER_COUNT = int(os.getenv("ECP_WORKER_COUNT", self.WORKER_COUNT))
            self.SEED = int(os.getenv("ECP_SEED", self.SEED))
            self.TOP_K = int(os.getenv("ECP_TOP_K", self.TOP_K))
            self.MIN_ALIGNMENT_RATE = float(os.getenv("ECP_MIN_ALIGNMENT_RATE", self.MIN_ALIGNMENT_RATE))
        except ValueError as e:
            logger.warning(f"Invalid environment variable value: {e}")

    def _profile(self) -> Dict[str, Any]:
        return copy.deepcopy(self.PROFILE)

    def validate(self) -> "Config":
        if self.WORKER_COUNT <= 0:
            raise ConfigurationError("WORKER_COUNT must be positive")
        if not (self.WINDOW > self.STRIDE > 0):
            raise ConfigurationError(f"need WINDOW > STRIDE > 0, got {self.WINDOW}/{self.STRIDE}")
        if not 0 < self.TEST_FRACTION < 1:
            raise ConfigurationError("TEST_FRACTION must be in (0, 1)")
        if not 0 <= self.MIN_ALIGNMENT_RATE <= 1:
            raise ConfigurationError("MIN_ALIGNMENT_RATE must be in [0, 1]")
        if self.TOP_K < 1:
            raise ConfigurationError("TOP_K must be >= 1")
        if self.GENERATION_LENGTH < 2:
            raise ConfigurationError("GENERATION_LENGTH must be >= 2")
        self.quantization.validate()
        self.model.validate()
        self.training.validate()
        self.schedule.validate()
        return self

    def apply_overrides(self, overrides: Dict[str, Any]) -> "Config":
        """Apply a nested dict of overrides (the JSON config file format)"""
        top_level = {f.name for f in fields(self)}
        for key, value in overrides.items():
            if key in _SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigurationError(f"section '{key}' must be an object")
                section = getattr(self, key)
                known = {f.name for f in fields(section)}
                for sub_key, sub_value in value.items():
                    if sub_key not in known:
                        raise ConfigurationError(f"unknown config key: {key}.{sub_key}")
                    setattr(section, sub_key, sub_value)
            elif key in top_level:
                setattr(self, key, value)
            else:
                raise ConfigurationError(f"unknown config key: {key}")
        return self

    @classmethod
    def from_file(cls, path: str, base: Optional["Config"] = None) -> "Config":
        if not os.path.exists(path):
            raise FileNotFoundError(f"Config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            overrides = ujson.load(f)
        config = base if base is not None else get_config()
        config.apply_overrides(overrides)
        logger.info(f"Loaded configuration overrides from {path}")
        return config.validate()

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def resolve_device(self) -> str:
        if self.DEVICE != "auto":
            return self.DEVICE
        import torch
        return "cuda" if torch.cuda.is_available() else "cpu"


# Environment-specific configurations
class DevelopmentConfig(Config):
    """Development environment configuration"""
    PROFILE = {"LOG_LEVEL": "DEBUG", "WORKER_COUNT": 2}


class ProductionConfig(Config):
    """Full-scale training configuration"""
    PROFILE = {"WORKER_COUNT": 8, "EVAL_SAMPLES": 1000}


class TestingConfig(Config):
    """Desk-scale configuration for tests and smoke runs"""
    PROFILE = {
        "CACHE_DB_PATH": ":memory:",
        "WORKER_COUNT": 1,
        "DEVICE": "cpu",
        "GENERATION_LENGTH": 64,
        "EVAL_SAMPLES": 10,
        "model": {
            "d": 32, "d_z": 32, "K": 8, "encoder_layers": 1, "temporal_decoder_layers": 1,
            "subtoken_decoder_layers": 1, "heads": 2, "ffn_size": 64, "dropout": 0.0,
            "prior_layers": 1, "prior_heads": 2, "prior_ffn_size": 64,
        },
        "training": {
            "epochs": 4, "batch_size": 4, "beta_anneal_epochs": 2, "log_every_steps": 1,
            "prior_epochs": 4, "prior_batch_size": 4,
        },
        "schedule": {"warmup_epochs": 1, "peak_lr": 1e-3, "decay_end_epoch": 3, "floor_lr": 2e-4, "stop_epoch": 4},
    }


def get_config() -> Config:
    """Get configuration based on environment"""
    env = os.getenv("ECP_ENV", "development").lower()

    if env == "production":
        return ProductionConfig()
    elif env == "testing":
        return TestingConfig()
    else:
        return DevelopmentConfig()
