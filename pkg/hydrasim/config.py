"""
Hydra Simulator Configuration Module

Centralizes protocol constants and environment settings so the simulation
has a single source of truth for every tunable the protocols rely on.

See: docs/adr/ADR-001-deterministic-simulation-and-fault-model.md
"""

from typing import Final

from pydantic import AliasChoices, Field
from pydantic_settings import BaseSettings, SettingsConfigDict


# Identity / DHT
ID_BITS: Final[int] = 256
BUCKET_CAPACITY: Final[int] = 20  # M
LOOKUP_FANOUT: Final[int] = 3  # k
REFRESH_BUCKETS: Final[int] = 10
LIVENESS_WINDOW_MS: Final[int] = 5_000
RPC_TIMEOUT_FACTOR: Final[int] = 4  # timeout = factor x max base latency

# Raft
ELECTION_TIMEOUT_MIN_MS: Final[int] = 150
ELECTION_TIMEOUT_MAX_MS: Final[int] = 300
HEARTBEAT_INTERVAL_MS: Final[int] = 50
APPEND_BATCH_LIMIT: Final[int] = 64
PROPOSE_TIMEOUT_MS: Final[int] = 1_000

# Multi trackers
REPLICA_COUNT: Final[int] = 3  # N
DEAD_MEMBER_AFTER_MS: Final[int] = 6 * HEARTBEAT_INTERVAL_MS
MAINTENANCE_INTERVAL_MS: Final[int] = 100
SNAPSHOT_PERIOD_MS: Final[int] = 500_000
SNAPSHOT_EVERY_VERSIONS: Final[int] = 10
LIVENESS_POLL_MS: Final[int] = 2_000

# Registry
CHUNK_SIZE_BYTES: Final[int] = 64 * 1024
CLIENT_ATTEMPTS: Final[int] = 8

# All-reduce
REFRESH_CYCLES: Final[int] = 3

# Training
LARS_EPSILON: Final[float] = 1e-12
LOSS_SCALE_GROWTH_INTERVAL: Final[int] = 200
WARMUP_FRACTION: Final[float] = 0.05

# Placement
POLICY_HIDDEN_UNITS: Final[int] = 64
POLICY_LEARNING_RATE: Final[float] = 1e-3
BASELINE_DECAY: Final[float] = 0.9
EXPLORATION_TAU_START: Final[float] = 1.0
EXPLORATION_TAU_END: Final[float] = 0.1

# Coin
BYTES_PER_MB: Final[int] = 1_000_000
DIVERSITY_STEP: Final[float] = 0.05
DIVERSITY_CAP: Final[float] = 1.5

# Harness
POOL_WEIGHT_LATENCY: Final[float] = 0.5
POOL_WEIGHT_COMPUTE: Final[float] = 0.3
POOL_WEIGHT_CLOSENESS: Final[float] = 0.2

# Results service
DEFAULT_API_URL: Final[str] = "http://localhost:8000"
DEFAULT_API_TIMEOUT: Final[float] = 10.0
MAX_METRICS_PER_BATCH: Final[int] = 10_000
DEFAULT_DATABASE_URL: Final[str] = "sqlite+aiosqlite:///./hydrasim.db"


class HydraSettings(BaseSettings):
    """
    Environment-level settings.

    Usage:
        settings = HydraSettings()
        configure_logging(settings.log_level)  # hydrasim.cli
    """

    model_config = SettingsConfigDict(env_prefix="HYDRA_", env_file=".env", extra="ignore", populate_by_name=True)

    log_level: str = "WARNING"
    output_dir: str = "runs"
    api_url: str = DEFAULT_API_URL
    api_timeout: float = DEFAULT_API_TIMEOUT
    publish: bool = False
    sweep_scale: float = 1.0
    # also read from a bare DATABASE_URL
    database_url: str = Field(
        default=DEFAULT_DATABASE_URL, validation_alias=AliasChoices("HYDRA_DATABASE_URL", "DATABASE_URL")
    )
    database_echo: bool = False
