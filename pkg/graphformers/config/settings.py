"""
Run configuration with Pydantic Settings.
Precedence: defaults < environment (GFK_*) < JSON config file < CLI flags.
"""
import difflib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Type, Union

from pydantic import BaseModel, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from graphformers.errors import ConfigError
from graphformers.models.schemas import BenchOptions, EvalOptions, ModelConfig, SynthConfig, TrainSchedule

logger = logging.getLogger(__name__)


class RunConfig(BaseSettings):
    """
    Merged view of every module config plus run-level settings.
    Environment variables use the GFK_ prefix and ``__`` for nesting,
    e.g. ``GFK_SEED=7`` or ``GFK_TRAIN__BATCH_SIZE=16``.
    """

    # === Sections ===
    model: ModelConfig = Field(default_factory=ModelConfig, description="Architecture")
    data: SynthConfig = Field(default_factory=SynthConfig, description="Synthetic graph generator")
    train: TrainSchedule = Field(default_factory=TrainSchedule, description="Training schedule")
    eval: EvalOptions = Field(default_factory=EvalOptions, description="Ranking evaluation")
    bench: BenchOptions = Field(default_factory=BenchOptions, description="Scaling benchmark")

    # === Run ===
    seed: int = Field(default=0, description="Global seed for data, init, batches and evaluation")
    output_dir: str = Field(default="runs/default", description="Run directory for every artifact")
    data_dir: Optional[str] = Field(default=None, description="Dataset directory (default: <output_dir>/data)")
    num_workers: int = Field(default=1, ge=1, description="Threads for evaluation encoding")

    # === Observability ===
    log_level: str = Field(default="INFO", description="Logging level")
    log_format: str = Field(default="text", description="Log format: json or text")

    model_config = SettingsConfigDict(
        env_prefix="GFK_",
        env_nested_delimiter="__",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        allowed = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        v = v.upper()
        if v not in allowed:
            raise ValueError(f"Log level must be one of: {allowed}")
        return v

    @field_validator("log_format")
    @classmethod
    def validate_log_format(cls, v: str) -> str:
        allowed = ["json", "text"]
        if v not in allowed:
            raise ValueError(f"Log format must be one of: {allowed}")
        return v

    @property
    def dataset_dir(self) -> Path:
        return Path(self.data_dir) if self.data_dir else Path(self.output_dir) / "data"

    @property
    def train_seed(self) -> int:
        return self.train.seed if self.train.seed is not None else self.seed


def _section_model(cls: Type[BaseModel], key: str) -> Optional[Type[BaseModel]]:
    annotation = cls.model_fields[key].annotation
    if isinstance(annotation, type) and issubclass(annotation, BaseModel):
        return annotation
    return None


def _leaf_paths(cls: Type[BaseModel], prefix: str = "") -> List[str]:
    paths = []
    for key in cls.model_fields:
        nested = _section_model(cls, key)
        if nested is not None:
            paths.extend(_leaf_paths(nested, f"{prefix}{key}."))
        else:
            paths.append(f"{prefix}{key}")
    return paths


def check_keys(data: Mapping[str, Any], cls: Type[BaseModel] = RunConfig, prefix: str = "") -> None:
    """
    Reject keys that ``cls`` does not define, naming the valid keys of that
    section and the closest match anywhere in the config.
    """
    valid = list(cls.model_fields)
    for key, value in data.items():
        if key not in cls.model_fields:
            leaves = _leaf_paths(RunConfig)
            by_leaf = {path.rsplit(".", 1)[-1]: path for path in leaves}
            close = difflib.get_close_matches(key, valid, n=1) or [
                by_leaf[m] for m in difflib.get_close_matches(key, list(by_leaf), n=1)
            ]
            hint = f"; did you mean '{prefix}{close[0]}'?" if close and "." not in close[0] else (
                f"; did you mean '{close[0]}'?" if close else ""
            )
            raise ConfigError(f"unknown config key '{prefix}{key}'{hint} Valid keys: {', '.join(valid)}")
        nested = _section_model(cls, key)
        if nested is not None:
            if not isinstance(value, Mapping):
                raise ConfigError(f"config key '{prefix}{key}' must be an object")
            check_keys(value, nested, f"{prefix}{key}.")


def _merge(base: Dict[str, Any], override: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = _merge(dict(merged[key]), value)
        else:
            merged[key] = value
    return merged


def nest_overrides(overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """{"train.learning_rate": 5e-4} -> {"train": {"learning_rate": 5e-4}}."""
    nested: Dict[str, Any] = {}
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = nested
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return nested


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """
    Build a RunConfig from defaults, GFK_* environment variables, an optional
    JSON file and dotted-key flag overrides (in increasing precedence).

    Raises:
        ConfigError: unknown key, type mismatch (with the dotted key path) or
            a config file that is not a JSON object
    """
    file_data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        text = path.read_text().strip()
        if text:
            try:
                file_data = json.loads(text)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON ({e})") from e
            if not isinstance(file_data, dict):
                raise ConfigError(f"{path}: top level must be a JSON object")
        check_keys(file_data)
    flag_data = nest_overrides(overrides or {})
    check_keys(flag_data)

    try:
        config = RunConfig(**_merge(file_data, flag_data))
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(part) for part in first["loc"])
        raise ConfigError(f"invalid value for '{where}': {first['msg']}") from e
    return config


def write_resolved_config(config: RunConfig, directory: Union[str, Path]) -> Path:
    """Echo the fully resolved config to ``<directory>/resolved_config.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "resolved_config.json"
    path.write_text(config.model_dump_json(indent=2) + "\n")
    return path


# Global settings instance
_settings: Optional[RunConfig] = None


def get_settings() -> RunConfig:
    """
    Get run settings singleton.
    Lazily loads defaults and environment on first access.
    """
    global _settings
    if _settings is None:
        _settings = RunConfig()
    return _settings


def reload_settings(config: Optional[RunConfig] = None) -> RunConfig:
    """
    Replace the singleton, re-reading the environment unless ``config`` is given.
    """
    global _settings
    _settings = config or RunConfig()
    return _settings
