"""
Configuration for BagRank.

Defaults come from the environment (and a local ``.env`` file), then can be
overridden by CLI flags or by constructing the dataclasses directly.
"""

import os
from dataclasses import dataclass, field
from typing import Optional

from dotenv import load_dotenv

from errors import ConfigError

# Load environment variables
load_dotenv()

TAU_MIN = 1e-3
TAU_MAX = 10.0
RECALL_KS = (1, 5, 10)


def _env_flag(name: str, default: bool) -> bool:
    value = os.getenv(name)
    if value is None or not value.strip():
        return default
    return value.strip().lower() in ("1", "true", "yes", "on")


def _env_int(name: str, default: int) -> int:
    value = os.getenv(name)
    if value is None or not value.strip():
        return default
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {value!r}")


def threads_from_env() -> Optional[int]:
    """Return the BAGF_THREADS override, or None when unset."""
    value = os.getenv("BAGF_THREADS")
    if value is None or not value.strip():
        return None
    threads = _env_int("BAGF_THREADS", 1)
    if threads < 1:
        raise ConfigError(f"BAGF_THREADS must be >= 1, got {threads}")
    return threads


def default_threads() -> int:
    return threads_from_env() or os.cpu_count() or 1


@dataclass
class BagRankConfig:
    """Engine-wide settings shared by the CLI commands"""
    dim: int = field(default_factory=lambda: _env_int("BAGF_DIM", 64))
    renormalize_bags: bool = field(default_factory=lambda: _env_flag("BAGF_RENORMALIZE", True))
    rerank_depth: int = field(default_factory=lambda: _env_int("BAGF_RERANK_DEPTH", 64))
    threads: int = field(default_factory=default_threads)
    log_level: str = field(default_factory=lambda: os.getenv("BAGF_LOG_LEVEL", "WARNING"))

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")
        if self.rerank_depth < 1:
            raise ConfigError(f"rerank_depth must be >= 1, got {self.rerank_depth}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")


@dataclass
class TrainConfig:
    """Settings for desk-scale training of the projection heads"""
    dim: int = 64
    epochs: int = 200
    batch_size: int = 32
    lr: float = 0.5
    tau_lr: float = 1e-4
    tau_init: float = 0.07
    lambda_bwc: float = 1.0
    separate_tau: bool = False
    bwc_direction: str = "i2t"
    renormalize_bags: bool = True
    placement: str = "late"
    shuffle: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.lr < 0 or self.tau_lr < 0:
            raise ConfigError("learning rates must be >= 0")
        if not TAU_MIN <= self.tau_init <= TAU_MAX:
            raise ConfigError(f"tau_init must lie in [{TAU_MIN}, {TAU_MAX}], got {self.tau_init}")
        if self.lambda_bwc < 0:
            raise ConfigError(f"lambda_bwc must be >= 0, got {self.lambda_bwc}")
        if self.bwc_direction not in ("i2t", "symmetric"):
            raise ConfigError(f"bwc_direction must be 'i2t' or 'symmetric', got {self.bwc_direction!r}")
        if self.placement not in ("early", "late"):
            raise ConfigError(f"placement must be 'early' or 'late', got {self.placement!r}")


@dataclass
class BenchConfig:
    """Re-ranking benchmark setup; defaults echo a 14x14 patch grid and 64 candidates"""
    n: int = 196
    k: int = 32
    dim: int = 64
    candidates: int = 64
    queries: int = 1000
    warmup: int = 10
    workers: int = field(default_factory=default_threads)
    encoder_layers: int = 0
    encoder_dim: int = 384
    seed: int = 0

    def __post_init__(self):
        for name in ("n", "k", "dim", "candidates", "queries", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.warmup < 10:
            raise ConfigError(f"warmup must be >= 10, got {self.warmup}")
        if self.encoder_layers < 0:
            raise ConfigError(f"encoder_layers must be >= 0, got {self.encoder_layers}")
        if self.encoder_layers and self.encoder_dim < 1:
            raise ConfigError(f"encoder_dim must be >= 1, got {self.encoder_dim}")
        override = threads_from_env()
        if override is not None:
            self.workers = override
