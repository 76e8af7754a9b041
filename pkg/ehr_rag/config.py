"""
Configuration for the EHR-RAG pipeline
Contains all constants, retrieval defaults, and the validated run configuration
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from ehr_rag.errors import ConfigError

logger = logging.getLogger(__name__)

# ============================================================================
# ETHER: EVENT- AND TIME-AWARE HYBRID RETRIEVAL
# ============================================================================

DEFAULT_ALPHA = 0.75            # semantic / temporal trade-off
DEFAULT_TAU_RECENT_DAYS = 180.0
DEFAULT_TAU_EARLY_DAYS = 3650.0
DEFAULT_K_CAND = 100            # candidate pool before temporal re-ranking
DEFAULT_K_FINAL = 5
DEFAULT_N_COARSE = 30           # indicators kept by embedding similarity
DEFAULT_N_FINE = 10             # indicators kept after model reranking
DEFAULT_N_RECENT = 5            # measurements kept per indicator

# ============================================================================
# AIR: ADAPTIVE ITERATIVE RETRIEVAL
# ============================================================================

DEFAULT_MAX_ITERATIONS = 3
DEFAULT_SUFFICIENCY_TOKEN_BUDGET = 8000
MAX_QUERY_CHARS = 200

# ============================================================================
# CHUNKING AND EMBEDDING
# ============================================================================

DEFAULT_CHUNK_SIZE = 100        # event rows per chunk
DEFAULT_CHUNK_OVERLAP = 5
DEFAULT_EMBEDDING_DIMENSION = 512
DEFAULT_EMBEDDING_IN_FLIGHT = 4

# ============================================================================
# LANGUAGE MODEL GATEWAY
# ============================================================================

DEFAULT_TEMPERATURE = 0.0
DEFAULT_MAX_OUTPUT_TOKENS = 1024
DEFAULT_MAX_CONTEXT_TOKENS = 128000
DEFAULT_CHARS_PER_TOKEN = 4.0
DEFAULT_RETRY_ATTEMPTS = 3
DEFAULT_RETRY_BACKOFF_SECONDS = 1.0   # doubles per attempt: 1s, 2s, 4s
DEFAULT_MAX_IN_FLIGHT = 4
DEFAULT_HTTP_TIMEOUT_SECONDS = 120.0

# ============================================================================
# BASELINES
# ============================================================================

DIRECT_EVENT_BUDGET = 1000
RULE_EVENT_BUDGET = 1000
VANILLA_TOP_K = 10
REACT_TOP_K = 5
REACT_ITERATIONS = 3
DEFAULT_SEED = 0
PRNG_ALGORITHM = "numpy.PCG64"

# ============================================================================
# METHODS
# ============================================================================

METHOD_EHR_RAG = "ehr-rag"
METHOD_EHR_RAG_NO_ETHER = "ehr-rag-no-ether"
METHOD_EHR_RAG_NO_AIR = "ehr-rag-no-air"
METHOD_EHR_RAG_NO_DER = "ehr-rag-no-der"
METHOD_DIRECT = "direct"
METHOD_RAG = "rag"
METHOD_UNIFORM = "uniform"
METHOD_RULE = "rule"
METHOD_REACT = "react"

EHR_RAG_METHODS = [METHOD_EHR_RAG, METHOD_EHR_RAG_NO_ETHER, METHOD_EHR_RAG_NO_AIR, METHOD_EHR_RAG_NO_DER]
BASELINE_METHODS = [METHOD_DIRECT, METHOD_RAG, METHOD_UNIFORM, METHOD_RULE, METHOD_REACT]
ALL_METHODS = EHR_RAG_METHODS + BASELINE_METHODS

# ============================================================================
# EVENT FILE COLUMNS
# ============================================================================

DEFAULT_EVENT_SCHEMA = {
    "subject_id": "subject_id",
    "time": "time",
    "code": "code",
    "event_type": "event_type",
    "numeric_value": "numeric_value",
    "unit": "unit",
    "text_value": "text_value",
}

REQUIRED_EVENT_FIELDS = ["subject_id", "time", "code"]

ONTOLOGY_COLUMNS = ["code", "description"]
LABEL_COLUMNS = ["subject_id", "prediction_time", "label"]

UNKNOWN_DESCRIPTION = "unknown"

# ============================================================================
# TIMESTAMPS
# ============================================================================

INTERNAL_TIMEZONE = "UTC"
TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S"

# ============================================================================
# EXIT CODES
# ============================================================================

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRANSPORT = 4

# ============================================================================
# OUTPUT FILES
# ============================================================================

RESOLVED_CONFIG_FILENAME = "resolved_config.yaml"
COHORT_MANIFEST_FILENAME = "manifest.json"
INDEX_MANIFEST_FILENAME = "manifest.json"


# ============================================================================
# RUN CONFIGURATION MODEL
# ============================================================================

class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class EtherConfig(_Section):
    alpha: float = DEFAULT_ALPHA
    tau_recent_days: float = DEFAULT_TAU_RECENT_DAYS
    tau_early_days: float = DEFAULT_TAU_EARLY_DAYS
    k_cand: int = DEFAULT_K_CAND
    k_final: int = DEFAULT_K_FINAL
    n_coarse: int = DEFAULT_N_COARSE
    n_fine: int = DEFAULT_N_FINE
    n_recent: int = DEFAULT_N_RECENT

    @field_validator("alpha")
    @classmethod
    def _alpha_in_unit_interval(cls, value: float) -> float:
        if not 0.0 <= value <= 1.0:
            raise ValueError("alpha out of [0,1]")
        return value

    @field_validator("tau_recent_days", "tau_early_days")
    @classmethod
    def _positive_duration(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("duration must be strictly positive")
        return value

    @field_validator("k_cand", "k_final", "n_coarse", "n_fine", "n_recent")
    @classmethod
    def _positive_count(cls, value: int) -> int:
        if value < 1:
            raise ValueError("count must be >= 1")
        return value

    @model_validator(mode="after")
    def _budgets_ordered(self) -> "EtherConfig":
        if self.k_final > self.k_cand:
            raise ValueError("k_final must not exceed k_cand")
        if self.n_fine > self.n_coarse:
            raise ValueError("n_fine must not exceed n_coarse")
        return self


class AirConfig(_Section):
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    sufficiency_token_budget: int = DEFAULT_SUFFICIENCY_TOKEN_BUDGET
    max_query_chars: int = MAX_QUERY_CHARS

    @field_validator("max_iterations", "sufficiency_token_budget", "max_query_chars")
    @classmethod
    def _positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be >= 1")
        return value


class ChunkingConfig(_Section):
    chunk_size: int = DEFAULT_CHUNK_SIZE
    overlap: int = DEFAULT_CHUNK_OVERLAP

    @model_validator(mode="after")
    def _overlap_below_size(self) -> "ChunkingConfig":
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if not 0 <= self.overlap < self.chunk_size:
            raise ValueError("overlap must satisfy 0 <= overlap < chunk_size")
        return self


class GatewayConfig(_Section):
    provider: Literal["mock", "http"] = "mock"
    scenario_path: Optional[str] = None
    endpoint: Optional[str] = None
    model: Optional[str] = None
    api_key_env: Optional[str] = None
    temperature: float = DEFAULT_TEMPERATURE
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS
    max_context_tokens: int = DEFAULT_MAX_CONTEXT_TOKENS
    chars_per_token: float = DEFAULT_CHARS_PER_TOKEN
    retry_attempts: int = DEFAULT_RETRY_ATTEMPTS
    retry_backoff_seconds: float = DEFAULT_RETRY_BACKOFF_SECONDS
    max_in_flight: int = DEFAULT_MAX_IN_FLIGHT
    timeout_seconds: float = DEFAULT_HTTP_TIMEOUT_SECONDS

    @field_validator("temperature")
    @classmethod
    def _temperature_range(cls, value: float) -> float:
        if not 0.0 <= value <= 2.0:
            raise ValueError("temperature out of [0,2]")
        return value

    @field_validator("max_output_tokens", "max_context_tokens", "retry_attempts", "max_in_flight")
    @classmethod
    def _positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be >= 1")
        return value

    @field_validator("chars_per_token", "timeout_seconds")
    @classmethod
    def _positive_real(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("must be > 0")
        return value

    @model_validator(mode="after")
    def _http_needs_endpoint(self) -> "GatewayConfig":
        if self.provider == "http" and not self.endpoint:
            raise ValueError("http provider requires an endpoint")
        return self


class EmbeddingConfig(_Section):
    provider: Literal["hashing", "http"] = "hashing"
    dimension: int = DEFAULT_EMBEDDING_DIMENSION
    endpoint: Optional[str] = None
    model: Optional[str] = None
    api_key_env: Optional[str] = None
    max_in_flight: int = DEFAULT_EMBEDDING_IN_FLIGHT
    timeout_seconds: float = DEFAULT_HTTP_TIMEOUT_SECONDS

    @field_validator("dimension", "max_in_flight")
    @classmethod
    def _positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be >= 1")
        return value

    @model_validator(mode="after")
    def _http_needs_endpoint(self) -> "EmbeddingConfig":
        if self.provider == "http" and not self.endpoint:
            raise ValueError("http provider requires an endpoint")
        return self


class BaselineSettings(_Section):
    direct_event_budget: int = DIRECT_EVENT_BUDGET
    rule_event_budget: int = RULE_EVENT_BUDGET
    vanilla_top_k: int = VANILLA_TOP_K
    react_top_k: int = REACT_TOP_K
    react_iterations: int = REACT_ITERATIONS
    uniform_seed: int = DEFAULT_SEED

    @field_validator("direct_event_budget", "rule_event_budget", "vanilla_top_k", "react_top_k", "react_iterations")
    @classmethod
    def _positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError("budget must be >= 1")
        return value


class RunConfig(_Section):
    ether: EtherConfig = EtherConfig()
    air: AirConfig = AirConfig()
    chunking: ChunkingConfig = ChunkingConfig()
    gateway: GatewayConfig = GatewayConfig()
    embedding: EmbeddingConfig = EmbeddingConfig()
    baselines: BaselineSettings = BaselineSettings()
    seed: int = DEFAULT_SEED
    workers: Optional[int] = None
    parallel_paths: bool = False

    @field_validator("workers")
    @classmethod
    def _positive_workers(cls, value: Optional[int]) -> Optional[int]:
        if value is not None and value < 1:
            raise ValueError("workers must be >= 1")
        return value


# ============================================================================
# LOADING, OVERRIDES, SNAPSHOTS
# ============================================================================

def _format_validation_error(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        field = ".".join(str(loc) for loc in item["loc"]) or "<root>"
        message = item["msg"].removeprefix("Value error, ")
        parts.append(f"{field}: {message}")
    return "; ".join(parts)


def build_run_config(data: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Validate a nested mapping into a RunConfig

    Args:
        data: Mapping as read from a config file (missing keys take defaults)

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: naming every offending field
    """
    try:
        return RunConfig.model_validate(data or {})
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {_format_validation_error(e)}") from e


def load_run_config(path: Optional[str]) -> RunConfig:
    """
    Load a YAML run configuration file

    Args:
        path: Config file path, or None for pure defaults

    Returns:
        Validated RunConfig
    """
    if path is None:
        return RunConfig()

    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f"Config file not found: {config_path}")

    try:
        data = yaml.safe_load(config_path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark is not None else ""
        raise ConfigError(f"Could not parse {config_path}{where}: {getattr(e, 'problem', e)}") from e

    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{config_path}: top level must be a mapping")

    return build_run_config(data)


def _set_in_file(file_config: BaseModel, keys: List[str]) -> bool:
    """True when every level of the dotted key was present in the loaded file"""
    section = file_config
    for key in keys:
        if key not in section.model_fields_set:
            return False
        section = getattr(section, key)
    return True


def apply_overrides(config: RunConfig, overrides: Dict[str, Any], file_config: Optional[RunConfig] = None) -> RunConfig:
    """
    Apply dotted-key overrides (CLI flags) on top of a config

    Flags win over file values; each flag that replaces a value the file set
    explicitly (even to its default) is logged.

    Args:
        config: Base configuration
        overrides: Mapping like {"ether.alpha": 0.5}; None values are ignored
        file_config: Configuration as loaded from file, used for conflict notes

    Returns:
        New validated RunConfig
    """
    data = config.model_dump(mode="json")
    file_source = file_config or config
    reference = file_source.model_dump(mode="json")

    for dotted_key, value in overrides.items():
        if value is None:
            continue
        keys = dotted_key.split(".")
        target = data
        ref = reference
        for key in keys[:-1]:
            if key not in target or not isinstance(target[key], dict):
                raise ConfigError(f"Unknown configuration section: {dotted_key}")
            target = target[key]
            ref = ref[key]
        leaf = keys[-1]
        if leaf not in target:
            raise ConfigError(f"Unknown configuration field: {dotted_key}")
        if _set_in_file(file_source, keys) and ref[leaf] != value:
            logger.info(
                "Flag overrides config file value",
                extra={"field": dotted_key, "file_value": ref[leaf], "flag_value": value},
            )
        target[leaf] = value

    return build_run_config(data)


def config_to_dict(config: RunConfig) -> Dict[str, Any]:
    return config.model_dump(mode="json")


def write_config_snapshot(config: RunConfig, out_dir: str) -> Path:
    """
    Write the resolved configuration next to a run's outputs

    Args:
        config: Effective configuration
        out_dir: Output directory (created if missing)

    Returns:
        Path of the snapshot file
    """
    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    snapshot = out_path / RESOLVED_CONFIG_FILENAME
    snapshot.write_text(yaml.safe_dump(config_to_dict(config), sort_keys=True), encoding="utf-8")
    return snapshot