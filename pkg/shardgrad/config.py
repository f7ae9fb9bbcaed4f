"""Settings and run configuration via pydantic-settings."""
from functools import lru_cache
from pathlib import Path
from typing import Annotated, Any, Literal

from pydantic import AliasChoices, BaseModel, ConfigDict, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, NoDecode, SettingsConfigDict

from shardgrad.errors import ConfigError

IntList = Annotated[list[int], NoDecode]


class DomainConfig(BaseModel):
    """Frozen, validated configuration object; invalid values raise ConfigError."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    def __init__(self, **data: Any) -> None:
        try:
            super().__init__(**data)
        except ValidationError as exc:
            raise ConfigError(f"invalid {type(self).__name__}: {exc}") from exc


class Settings(BaseSettings):
    """Process-level settings loaded from environment variables or .env file."""

    debug: bool = False
    transport_timeout_s: float = 30.0

    # Optional data locations for the long-running acceptance tests
    mnist_dir: Path | None = Field(None, validation_alias=AliasChoices("shardgrad_mnist_dir", "mnist_dir"))
    corpus: Path | None = Field(None, validation_alias=AliasChoices("shardgrad_corpus", "corpus"))

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    @field_validator("debug", mode="before")
    @classmethod
    def _truthy(cls, value: Any) -> Any:
        if isinstance(value, str):
            return value.strip().lower() in ("1", "true", "yes")
        return value


@lru_cache()
def get_settings() -> Settings:
    """Return cached Settings instance (singleton)."""
    return Settings()


class RunConfig(BaseSettings):
    """One batch run: flags override the config file, which overrides SHARDGRAD_* env vars."""

    command: Literal["train", "cost", "regret", "verify"] = "train"

    # Network and parallelism
    net: Literal["fc", "cnn", "rnn", "lstm"] = "fc"
    mode: Literal["none", "data", "model", "hybrid"] = "none"
    workers: int = 1
    replicas: int = 1
    exchange: Literal["hypercube", "master_relay"] = "hypercube"
    deterministic: bool = False
    n_fetch: int = 1
    n_push: int = 1
    sizes: IntList = [784, 480, 160, 10]
    hidden_sizes: IntList = [200, 100]

    # Optimisation
    optimizer: Literal["sgd", "momentum", "rmsprop"] = "sgd"
    lr: float = 0.1
    momentum: float = 0.9
    rho: float = 0.9
    eps: float = 1e-8
    batch: int = 16
    epochs: int = 1
    seq_len: int = 100
    truncation: int = 25
    seed: int = 0

    # Data and output
    data: Path | None = None
    labels: Path | None = None
    test_data: Path | None = None
    test_labels: Path | None = None
    corpus: Path | None = None
    out: Path | None = None

    # Cost sweep
    f_list: IntList = [1, 2, 4, 8]
    m: int = 1
    t_lat: float = 1e-4
    t_data: float = 1e-8

    # Regret experiments
    taus: IntList = [1, 2, 5, 10]
    iterations: int = 10_000
    dim: int = 10
    lam: float = 1.0
    radius: float = 2.0
    center_radius: float = 1.0
    lr_scale: float = 0.5
    seeds: int = 5

    # Verification
    quick: bool = False
    inject_grad_error: float = 0.0

    model_config = SettingsConfigDict(
        env_prefix="SHARDGRAD_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    @field_validator("sizes", "hidden_sizes", "f_list", "taus", mode="before")
    @classmethod
    def _split_int_list(cls, value: Any) -> Any:
        if isinstance(value, str):
            parts = [p for p in value.replace(" ", "").split(",") if p]
            return [int(p) for p in parts]
        return value

    @field_validator("workers", "replicas", "n_fetch", "n_push", "batch", "epochs",
                     "seq_len", "truncation", "m", "iterations", "dim", "seeds")
    @classmethod
    def _positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be >= 1")
        return value


def load_config_file(path: str | Path) -> dict[str, str]:
    """Parse a flat key=value file. '#' starts a comment; blank lines are skipped."""
    values: dict[str, str] = {}
    known = set(RunConfig.model_fields)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_").lower()
        if key == "lambda":
            key = "lam"
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def build_run_config(file_values: dict[str, Any], flag_values: dict[str, Any]) -> RunConfig:
    """Merge config-file and flag values (flags win) on top of env/defaults."""
    merged = {**file_values, **{k: v for k, v in flag_values.items() if v is not None}}
    try:
        return RunConfig(**merged)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
