import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.core.errors import ConfigError

# Load environment variables
load_dotenv()


class AppConfig(BaseModel):
    app_name: str = "ReflowLab"
    debug: bool = os.getenv("DEBUG", "False").lower() == "true"
    log_level: str = os.getenv("LOG_LEVEL", "INFO")
    log_dir: str = os.getenv("LOG_DIR", "./logs")
    threads: int = int(os.getenv("REFLOWLAB_THREADS", "1"))


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetConfig(StrictModel):
    """Synthetic data distribution pi0"""
    kind: Literal["gauss_nd", "mixture_ring", "checkerboard", "cond_seq"] = "mixture_ring"
    dim: int = Field(2, ge=1)
    mean: Optional[List[float]] = Field(None, description="gauss_nd mean vector (defaults to zeros)")
    sigma: float = Field(0.2, description="gauss_nd std / mixture component std")
    components: int = Field(8, description="Ring mixture component count")
    radius: float = 4.0
    scale: float = Field(1.0, description="Checkerboard cell size")
    vocab_size: int = 4
    seq_len: int = 2
    seed: int = 0

    @field_validator("sigma", "scale")
    @classmethod
    def _positive(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("must be > 0")
        return value

    @field_validator("components", "vocab_size", "seq_len")
    @classmethod
    def _at_least_one(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be >= 1")
        return value

    @model_validator(mode="after")
    def _check_kind(self) -> "DatasetConfig":
        if self.kind == "gauss_nd" and self.mean is not None and len(self.mean) != self.dim:
            raise ValueError(f"mean has {len(self.mean)} entries but dim is {self.dim}")
        if self.kind in ("mixture_ring", "checkerboard", "cond_seq") and self.dim != 2:
            raise ValueError(f"{self.kind} is two-dimensional; got dim={self.dim}")
        return self

    @property
    def conditional(self) -> bool:
        return self.kind == "cond_seq"


class ModelConfig(StrictModel):
    teacher_width: int = Field(64, ge=1)
    student_width: int = Field(24, ge=1)
    depth: int = Field(4, ge=1)
    time_embed_dim: int = Field(16, ge=2)
    max_period: float = Field(100.0, gt=0)
    condition_dim: int = Field(16, ge=1, description="Width of the encoded condition vector")
    encoder_embed_dim: int = Field(16, ge=1)
    encoder_channels: int = Field(16, ge=1)
    encoder_layers: int = Field(2, ge=1)
    encoder_kernel_size: int = Field(3, ge=1)

    @field_validator("time_embed_dim")
    @classmethod
    def _even(cls, value: int) -> int:
        if value % 2:
            raise ValueError("must be even")
        return value


class TrainStageConfig(StrictModel):
    iterations: int = Field(4000, ge=0)
    batch_size: int = Field(256, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    block_weight_decay: float = Field(0.0, ge=0, description="Decoupled weight decay on the residual blocks only")
    lr_halve_at: Optional[int] = Field(None, ge=0, description="Iteration from which the learning rate is halved")


class PairGenConfig(StrictModel):
    pair_count: int = Field(50_000, ge=1)
    chunk_size: int = Field(256, ge=1)
    max_skip_fraction: float = Field(0.01, ge=0, le=1)


class AnnealStageConfig(TrainStageConfig):
    iterations: int = Field(4000, ge=0)
    learning_rate: float = Field(5e-4, gt=0)
    K_a_step: int = Field(3000, ge=0)


class DistillStageConfig(TrainStageConfig):
    iterations: int = Field(2000, ge=0)
    learning_rate: float = Field(2.5e-4, gt=0)
    two_step: bool = Field(True, description="Include the two-step regularizer (False is the naive-distillation arm)")
    pair_count: Optional[int] = Field(None, ge=1, description="Regenerated pair count (defaults to gen_pairs.pair_count)")


class StagesConfig(StrictModel):
    teacher: TrainStageConfig = Field(default_factory=TrainStageConfig)
    gen_pairs: PairGenConfig = Field(default_factory=PairGenConfig)
    anneal_reflow: AnnealStageConfig = Field(default_factory=AnnealStageConfig)
    distill: DistillStageConfig = Field(default_factory=DistillStageConfig)


class SolverConfig(StrictModel):
    kind: Literal["euler", "rk45"] = "rk45"
    euler_steps: int = Field(1, ge=1)
    rtol: float = Field(1e-5, gt=0)
    atol: float = Field(1e-5, gt=0)
    max_nfe: int = Field(10_000, ge=2)
    record_trajectory: bool = False


class MetricsConfig(StrictModel):
    n_samples: int = Field(4096, ge=2)
    n_projections: int = Field(256, ge=16)
    probe_steps: int = Field(64, ge=8)
    efficiency_samples: int = Field(32, ge=1)


class SeedsConfig(StrictModel):
    init: int = 0
    data: int = 1
    noise: int = 2
    time: int = 3
    pairs: int = 4
    eval: int = 5


class RunConfig(StrictModel):
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    stages: StagesConfig = Field(default_factory=StagesConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    seeds: SeedsConfig = Field(default_factory=SeedsConfig)
    output_dir: str = "runs/default"
    threads: int = Field(1, ge=1)
    log_interval: int = Field(100, ge=1)
    checkpoint_interval: int = Field(1000, ge=1)

    @model_validator(mode="after")
    def _check_stages(self) -> "RunConfig":
        if self.model.student_width >= self.model.teacher_width:
            raise ValueError(
                f"model.student_width ({self.model.student_width}) must be smaller than "
                f"model.teacher_width ({self.model.teacher_width})"
            )
        anneal = self.stages.anneal_reflow
        if anneal.K_a_step > anneal.iterations:
            raise ValueError(
                f"stages.anneal_reflow.K_a_step ({anneal.K_a_step}) exceeds "
                f"stages.anneal_reflow.iterations ({anneal.iterations})"
            )
        return self

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)


def _parse_override_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(document: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """
    Apply dotted-key overrides to a raw config document.

    Args:
        document: Parsed JSON document
        overrides: Mapping of dotted key paths (e.g. "stages.teacher.iterations") to values;
            string values are parsed as JSON when possible

    Returns:
        The updated document
    """
    for dotted, value in overrides.items():
        if isinstance(value, str):
            value = _parse_override_value(value)
        node = document
        keys = dotted.split(".")
        for key in keys[:-1]:
            child = node.setdefault(key, {})
            if not isinstance(child, dict):
                raise ConfigError(f"cannot override '{dotted}': '{key}' is not a section")
            node = child
        node[keys[-1]] = value
    return document


def format_validation_error(error: ValidationError) -> str:
    """One line per offending key path"""
    lines = []
    for item in error.errors():
        path = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"{path}: {item['msg']}")
    return "; ".join(lines)


def load_run_config(path: Optional[Union[str, Path]] = None,
                    overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Load and validate a run configuration.

    Args:
        path: JSON config file; None means all defaults
        overrides: Dotted-key overrides applied after the file (flags win)

    Returns:
        Fully validated RunConfig

    Raises:
        ConfigError: unreadable file, malformed JSON, unknown keys or invalid values
    """
    document: Dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        try:
            document = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e
        if not isinstance(document, dict):
            raise ConfigError(f"{path}: top level must be an object")

    if overrides:
        document = apply_overrides(document, overrides)

    try:
        return RunConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(format_validation_error(e)) from e


def config_hash(cfg: RunConfig) -> str:
    payload = json.dumps(cfg.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


# Create a singleton config instance
config = AppConfig()
