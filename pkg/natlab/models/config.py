"""
Pydantic configuration models and the flat key = value config file format.

Each section owns a disjoint set of keys, so a config file is a flat list of
assignments that is routed to the section that declares the key.
"""
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from natlab.errors import ConfigError


class ModelConfig(BaseModel):
    """Architecture of the conditional masked language model."""

    d_model: int = Field(default=64, ge=1, description="Model (embedding) dimension")
    d_inner: int = Field(default=256, ge=1, description="Feed-forward inner dimension")
    n_layers_enc: int = Field(default=2, ge=1, description="Number of encoder layers")
    n_layers_dec: int = Field(default=2, ge=1, description="Number of decoder layers")
    n_heads: int = Field(default=4, ge=1, description="Attention heads per layer")
    vocab_size: int = Field(default=0, ge=0, description="Joint vocabulary size (0 = take from vocab)")
    n_max: int = Field(default=1000, ge=1, description="Maximum target length / number of length classes")
    dropout_online: float = Field(default=0.3, ge=0.0, lt=1.0, description="Dropout of the online model")
    dropout_average: float = Field(default=0.3, ge=0.0, lt=1.0, description="Dropout of the average model")

    @model_validator(mode="after")
    def check_heads(self) -> "ModelConfig":
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


class LossConfig(BaseModel):
    """Weights of the training objective."""

    model_config = ConfigDict(populate_by_name=True)

    lambda_: float = Field(default=0.3, ge=0.0, alias="lambda", description="Weight of the five KL terms")
    label_smoothing: float = Field(default=0.1, ge=0.0, lt=1.0, description="Label smoothing on the NLL terms")
    batch_reduction: Literal["sum", "mean"] = Field(
        default="sum",
        description="Reduce per-sentence NLL and length losses over the batch: sum (the literal objective) or mean over sentences",
    )
    use_model_consistency: bool = Field(default=True, description="Include the online/average KL terms")
    use_shared_mask_consistency: bool = Field(default=True, description="Include the shared-mask KL terms")


class EmaConfig(BaseModel):
    """Exponential moving average of the online weights."""

    alpha: float = Field(default=0.996, ge=0.0, le=1.0, description="Moving average decay")


class TrainConfig(BaseModel):
    """Optimization, batching, checkpointing and runtime settings."""

    tokens_per_batch: int = Field(default=2048, ge=1, description="Target tokens per batch")
    max_steps: int = Field(default=10000, ge=0, description="Optimizer steps to run")
    warmup_steps: int = Field(default=4000, ge=1, description="Linear warmup length")
    peak_lr: float = Field(default=5e-4, gt=0.0, description="Learning rate at the end of warmup")
    adam_beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(default=0.98, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    clip_norm: float = Field(default=1.0, ge=0.0, description="Global gradient-norm clip (0 disables)")
    seed: int = Field(default=1, ge=0, description="Master seed for data order, masking and dropout")
    checkpoint_interval: int = Field(default=1000, ge=0, description="Steps between checkpoints (0 = only at end)")
    keep_last_k: int = Field(default=10, ge=1, description="Checkpoints kept on disk")
    log_interval: int = Field(default=10, ge=1, description="Steps between metrics records")
    eval_interval: int = Field(default=0, ge=0, description="Steps between held-out BLEU evaluations (0 = never)")
    prefetch: int = Field(default=0, ge=0, description="Batches prepared ahead on a worker thread")
    precision: Literal["float32", "float64"] = Field(default="float32", description="Floating point precision")
    num_threads: int = Field(default=1, ge=1, description="BLAS threads; recorded for reproducibility")
    verify_average_untouched: bool = Field(
        default=False, description="Hash the average weights around each optimizer step"
    )


class DecodeConfig(BaseModel):
    """Mask-predict inference settings."""

    iterations: int = Field(default=10, ge=1, description="Decoding iterations T")
    length_candidates: int = Field(default=5, ge=1, description="Length beams per sentence")
    remask_threshold: Optional[float] = Field(
        default=None, gt=0.0, lt=1.0,
        description="Re-mask tokens with probability below this value instead of the count schedule",
    )
    workers: int = Field(default=1, ge=1, description="Parallel decoding threads")


PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {"d_model": 64, "d_inner": 256, "n_layers_enc": 2, "n_layers_dec": 2, "n_heads": 4},
    "paper-small": {"d_model": 256, "d_inner": 1024, "n_layers_enc": 5, "n_layers_dec": 5, "n_heads": 4},
}


class ExperimentConfig(BaseModel):
    """All sections of one experiment."""

    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    ema: EmaConfig = Field(default_factory=EmaConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    decode: DecodeConfig = Field(default_factory=DecodeConfig)

    def with_overrides(self, **overrides: Any) -> "ExperimentConfig":
        """
        Return a copy with flat keys replaced.

        Args:
            **overrides: Flat config keys (e.g. lambda=0.5, iterations=4)

        Returns:
            New validated ExperimentConfig
        """
        flat = self.to_flat()
        for key, value in overrides.items():
            key = "lambda" if key == "lambda_" else key
            if key not in _KEY_TO_SECTION:
                raise ConfigError(f"Unknown config key: '{key}'")
            flat[key] = value
        return experiment_from_flat(flat)

    def to_flat(self) -> Dict[str, Any]:
        """Flatten every section into a single key -> value dict."""
        flat: Dict[str, Any] = {}
        for section in _SECTIONS:
            flat.update(getattr(self, section).model_dump(by_alias=True))
        return flat


_SECTIONS: Dict[str, type] = {
    "model": ModelConfig,
    "loss": LossConfig,
    "ema": EmaConfig,
    "train": TrainConfig,
    "decode": DecodeConfig,
}


def _build_key_index() -> Dict[str, str]:
    index: Dict[str, str] = {}
    for section, model in _SECTIONS.items():
        for name, field in model.model_fields.items():
            key = field.alias or name
            if key in index:
                raise RuntimeError(f"Config key '{key}' declared by two sections")
            index[key] = section
    return index


_KEY_TO_SECTION = _build_key_index()


def config_keys() -> List[str]:
    """All valid flat config keys."""
    return sorted(_KEY_TO_SECTION)


def experiment_from_flat(values: Dict[str, Any]) -> ExperimentConfig:
    """
    Build an ExperimentConfig from flat keys, applying an optional preset first.

    Args:
        values: Flat key -> value mapping; values may be strings

    Returns:
        Validated ExperimentConfig

    Raises:
        ConfigError: On unknown keys, unknown presets or failed validation
    """
    values = dict(values)
    sections: Dict[str, Dict[str, Any]] = {name: {} for name in _SECTIONS}

    preset = values.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"Unknown preset '{preset}'. Available: {', '.join(sorted(PRESETS))}")
        sections["model"].update(PRESETS[preset])

    for key, value in values.items():
        section = _KEY_TO_SECTION.get(key)
        if section is None:
            raise ConfigError(f"Unknown config key: '{key}'")
        if isinstance(value, str) and value.strip().lower() in ("none", "null", ""):
            value = None
        sections[section][key] = value

    try:
        return ExperimentConfig(**{name: _SECTIONS[name](**body) for name, body in sections.items()})
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration:\n{e}") from e


def read_config_file(filepath: str) -> ExperimentConfig:
    """
    Read a flat `key = value` config file.

    Lines starting with '#' and blank lines are ignored.

    Args:
        filepath: Path to the config file

    Returns:
        Validated ExperimentConfig
    """
    path = Path(filepath)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")

    values: Dict[str, Any] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key '{key}'")
        values[key] = value
    return experiment_from_flat(values)


def write_config_file(config: ExperimentConfig, filepath: str) -> None:
    """Write a config in the flat format read by read_config_file."""
    Path(filepath).parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for section in _SECTIONS:
        lines.append(f"# {section}")
        for key, value in getattr(config, section).model_dump(by_alias=True).items():
            lines.append(f"{key} = {'none' if value is None else value}")
        lines.append("")
    Path(filepath).write_text("\n".join(lines), encoding="utf-8")
