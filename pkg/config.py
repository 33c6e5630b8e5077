import os
import json
import logging
from pathlib import Path
from typing import Any, Literal, Optional, Type, TypeVar

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

# --- BASE PATHS ---
BASE_DIR = Path(__file__).resolve().parent
load_dotenv(BASE_DIR / ".env", override=False)

PROMPTS_DIR = Path(os.environ.get("CVR_PROMPTS_DIR", "").strip() or BASE_DIR / "prompts")

logger = logging.getLogger("CVR.Config")


class ConfigError(ValueError):
    """Raised when a config file or value does not match its config record."""


def _safe_float_env(name: str, default: float) -> float:
    try:
        return float(os.environ.get(name, default))
    except Exception:
        logger.warning("Ignoring non-numeric %s=%r", name, os.environ.get(name))
        return default


def _safe_int_env(name: str, default: int) -> int:
    try:
        return int(os.environ.get(name, default))
    except Exception:
        logger.warning("Ignoring non-integer %s=%r", name, os.environ.get(name))
        return default


# --- REMOTE POLICY (OpenAI-compatible chat completion) ---
# Credentials only ever come from the environment.
API_KEY_ENV = "CVR_API_KEY"
REMOTE_ENDPOINT = os.environ.get("CVR_REMOTE_ENDPOINT", "http://localhost:8000/v1").strip().rstrip("/")
REMOTE_MODEL = os.environ.get("CVR_REMOTE_MODEL", "agentcvr-master").strip() or "agentcvr-master"
REMOTE_TIMEOUT_S = _safe_float_env("CVR_REMOTE_TIMEOUT_S", 120.0)
REMOTE_RETRIES = _safe_int_env("CVR_REMOTE_RETRIES", 3)

LOG_LEVEL = os.environ.get("CVR_LOG_LEVEL", "INFO").strip().upper() or "INFO"

# --- PROTOCOL LIMITS ---
FRAME_BUDGET = 128           # max Σ num_frames in one observe call
NO_EVIDENCE = "No significant action observed."
OBS_BUCKETS = 16            # hash buckets for the last observation in a StateKey


def api_key() -> str:
    return os.environ.get(API_KEY_ENV, "").strip()


# --- RUN-TIME CONFIGS ---

def describe_errors(name: str, exc: ValidationError) -> str:
    parts = [
        f"{'.'.join(str(p) for p in err['loc']) or '$'}: {err['msg']}"
        for err in exc.errors(include_url=False)
    ]
    return f"Invalid {name} config: " + "; ".join(parts)


class RunConfig(BaseModel):
    """
    Base for the run-time configs: frozen, strictly typed, no unknown keys.
    Any validation failure surfaces as ConfigError.
    """
    model_config = ConfigDict(frozen=True, strict=True, extra="forbid")

    def __init__(self, **data: Any):
        try:
            super().__init__(**data)
        except ValidationError as exc:
            raise ConfigError(describe_errors(type(self).__name__, exc)) from exc


class EpisodeConfig(RunConfig):
    """
    Turn accounting for one episode.

    t_tol is read as an answer-only grace window after t_max turns: tool
    calls are refused there and the episode abstains after t_max + t_tol.
    """
    t_max: int = Field(default=20, gt=0)
    t_tol: int = Field(default=10, gt=0)
    min_tool_calls: int = Field(default=4, gt=0)
    retry_budget: int = Field(default=3, gt=0)
    min_tool_calls_mode: Literal["flag_only", "reject_answer"] = "flag_only"

    @property
    def turn_limit(self) -> int:
        return self.t_max + self.t_tol


class ProtocolConfig(RunConfig):
    frame_budget: int = Field(default=FRAME_BUDGET, gt=0)
    # When True a repaired answer (case/order/list form) costs the turn its format validity.
    strict_answer_format: bool = True


class RewardConfig(RunConfig):
    iou_threshold: float = Field(default=0.5, gt=0.0, le=1.0)
    # When True any retry inside a turn zeroes R_fmt, even if the retry succeeded.
    strict_format: bool = False


class GrpoConfig(RunConfig):
    """
    GRPO hyperparameters.

    The published hyperparameter table labels 0.005 as the KL coefficient
    under the clip symbol; here kl_beta=0.005 and clip_eps keeps the usual 0.2.
    Updates are plain gradient ascent with a fixed step.
    """
    group_size: int = Field(default=8, ge=2)
    clip_eps: float = Field(default=0.2, gt=0.0, lt=1.0)
    kl_beta: float = Field(default=0.005, ge=0.0)
    learning_rate: float = Field(default=1.0, gt=0.0)
    sigma_floor: float = Field(default=1e-8, gt=0.0)
    iterations: int = Field(default=500, gt=0)
    batch_size: int = Field(default=32, gt=0)
    seed: int = 0
    obs_buckets: int = Field(default=OBS_BUCKETS, gt=0)
    rollout_workers: int = Field(default=1, gt=0)
    early_stop_reward: Optional[float] = None
    show_progress: bool = False


class RemotePolicyConfig(RunConfig):
    endpoint: str = REMOTE_ENDPOINT
    model: str = REMOTE_MODEL
    temperature: float = Field(default=0.0, ge=0.0)
    max_tokens: int = Field(default=8192, gt=0)
    timeout_s: float = Field(default=REMOTE_TIMEOUT_S, gt=0.0)
    retries: int = Field(default=REMOTE_RETRIES, ge=0)
    backoff_base_s: float = Field(default=1.7, ge=0.0)
    max_in_flight: int = Field(default=4, gt=0)
    system_prompt: str = ""


class GeneratorKnobs(RunConfig):
    video_count: Optional[int] = Field(default=None, ge=2)  # family default when None (2 or 4)
    min_duration_s: float = 60.0
    max_duration_s: float = 180.0
    events_per_minute: float = 4.0
    min_event_s: float = 2.0


T = TypeVar("T", bound=RunConfig)


def config_from_dict(cls: Type[T], payload: Any) -> T:
    if not isinstance(payload, dict):
        raise ConfigError(f"{cls.__name__} config must be a JSON object")
    return cls(**payload)


def load_config_file(path: Path, cls: Type[T]) -> T:
    """Reads a UTF-8 JSON object whose keys mirror the config field names."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"Could not read {path}: {exc}") from exc
    return config_from_dict(cls, payload)


def config_to_dict(cfg: RunConfig) -> dict:
    return cfg.model_dump()
