import itertools
import logging
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Annotated, Any, Self

from pydantic import (
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)
from pydantic_settings import BaseSettings, SettingsConfigDict

from tinyron.domain.enums import Precision
from tinyron.domain.errors import ConfigurationError, StorageError

logger = logging.getLogger(__name__)

# Feature-map strides of the four detection scales, keyed by backbone layer.
SCALE_STRIDES: dict[int, int] = {4: 8, 5: 16, 6: 32, 7: 64}
ASPECT_RATIOS: tuple[float, ...] = (1 / 3, 1 / 2, 1.0, 2.0, 3.0)
SCALES_PER_LOCATION = 2
ANCHORS_PER_LOCATION = SCALES_PER_LOCATION * len(ASPECT_RATIOS)
SIZE_MULTIPLE = max(SCALE_STRIDES.values())


def require_divisible(size: int) -> int:
    """Return size, or raise ConfigurationError if the stride ladder does not fit it."""
    if size <= 0 or size % SIZE_MULTIPLE:
        msg = f"Input size {size} is not a positive multiple of {SIZE_MULTIPLE}"
        raise ConfigurationError(msg)
    return size


def _split_csv(value: Any) -> Any:  # noqa: ANN401 - pydantic before-validator input
    if isinstance(value, str):
        return tuple(part.strip() for part in value.split(",") if part.strip())
    return value


CsvInts = Annotated[tuple[int, ...], BeforeValidator(_split_csv)]
StemChannels = Annotated[tuple[int, int, int], BeforeValidator(_split_csv)]
BackboneChannels = Annotated[
    tuple[int, int, int, int],
    BeforeValidator(_split_csv),
]


class Settings(BaseSettings):
    """Process-level settings, loaded and validated from the environment."""

    model_config = SettingsConfigDict(
        env_prefix="TINYRON_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
        frozen=True,
    )

    log_level: str = "INFO"
    log_format: str = "%(asctime)s %(levelname)s %(name)s: %(message)s"
    eval_batch_size: int = Field(default=16, ge=1)

    def configure_logging(self) -> None:
        """Install the root handler; called once by entry points."""
        logging.basicConfig(level=self.log_level.upper(), format=self.log_format)


class ModelConfig(BaseModel):
    """Shape of a TinyRON network."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    input_size: int = Field(default=128, gt=0)
    num_classes: int = Field(default=3, ge=1)
    stem_channels: StemChannels = (8, 16, 16)
    backbone_channels: BackboneChannels = (16, 32, 32, 32)
    rf_channels: int = Field(default=32, ge=2, multiple_of=2)
    s_min: float | None = Field(default=None, gt=0.0)
    init_std: float = Field(default=0.01, gt=0.0)
    detection_scales: CsvInts = tuple(SCALE_STRIDES)
    use_objectness: bool = True
    precision: Precision = Precision.STANDARD

    @field_validator("detection_scales")
    @classmethod
    def _check_scales(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        if not value or any(scale not in SCALE_STRIDES for scale in value):
            msg = (
                f"detection_scales must be a non-empty subset of {tuple(SCALE_STRIDES)}"
            )
            raise ValueError(msg)
        return tuple(sorted(set(value)))

    @property
    def anchors_per_location(self) -> int:
        """A, the number of default boxes at each feature-map location."""
        return ANCHORS_PER_LOCATION

    def min_scale(self, size: int | None = None) -> float:
        """Return s_min for an input of `size` pixels (s_min scales with the size)."""
        size = self.input_size if size is None else size
        if self.s_min is None:
            return size / 10.0
        return self.s_min * size / self.input_size


class TrainConfig(BaseModel):
    """Hyper-parameters of the joint training loop."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    batch_size: int = Field(default=8, ge=1)
    base_lr: float = Field(default=1e-3, gt=0.0)
    # Drops after iteration 0; base_lr is in effect until the first one.
    schedule: tuple[tuple[int, float], ...] = ((1500, 1e-4),)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=5e-4, ge=0.0)
    total_iters: int = Field(default=2000, ge=0)
    o_p: float = Field(default=0.03, ge=0.0)
    seed: int = Field(default=0, ge=0)
    checkpoint_every: int = Field(default=500, ge=1)
    train_sizes: CsvInts = (128, 192)
    alpha: float = Field(default=1 / 3, ge=0.0, le=1.0)
    beta: float = Field(default=1 / 3, ge=0.0, le=1.0)
    neg_pos_ratio: int = Field(default=3, ge=0)
    log_every: int = Field(default=50, ge=1)

    @field_validator("schedule", mode="before")
    @classmethod
    def _parse_schedule(cls, value: Any) -> Any:  # noqa: ANN401
        if isinstance(value, str):
            pairs = []
            for item in _split_csv(value):
                start, _, lr = item.partition(":")
                pairs.append((start, lr))
            return tuple(pairs)
        return value

    @field_validator("schedule")
    @classmethod
    def _check_schedule(
        cls,
        value: tuple[tuple[int, float], ...],
    ) -> tuple[tuple[int, float], ...]:
        starts = [start for start, _ in value]
        if any(start <= 0 for start in starts):
            msg = "schedule drops must start after iteration 0; set base_lr instead"
            raise ValueError(msg)
        if any(later <= earlier for earlier, later in itertools.pairwise(starts)):
            msg = "schedule iterations must be strictly increasing"
            raise ValueError(msg)
        if any(lr <= 0 for _, lr in value):
            msg = "schedule learning rates must be positive"
            raise ValueError(msg)
        return value

    @field_validator("train_sizes")
    @classmethod
    def _check_sizes(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        if not value:
            msg = "train_sizes must not be empty"
            raise ValueError(msg)
        return value

    @model_validator(mode="after")
    def _check_weights(self) -> Self:
        if self.alpha + self.beta > 1.0:
            msg = f"alpha + beta must not exceed 1, got {self.alpha} + {self.beta}"
            raise ValueError(msg)
        return self

    def lr_at(self, iteration: int) -> float:
        """Learning rate at `iteration`: base_lr, then the last drop reached."""
        lr = self.base_lr
        for start, value in self.schedule:
            if iteration >= start:
                lr = value
        return lr


def parse_key_values(lines: Iterable[str], *, source: str) -> dict[str, str]:
    """Parse `key=value` lines; `#` starts a comment, blank lines are skipped."""
    values: dict[str, str] = {}
    for number, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            msg = f"{source}:{number}: expected key=value, got {raw.strip()!r}"
            raise ConfigurationError(msg)
        values[key.strip()] = value.strip()
    return values


def load_config(
    path: Path | None = None,
    overrides: Sequence[str] = (),
) -> tuple[ModelConfig, TrainConfig]:
    """Load ModelConfig and TrainConfig from a key=value file plus `--set` overrides."""
    values: dict[str, str] = {}
    if path is not None:
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            msg = f"Cannot read config file {path}"
            raise StorageError(msg) from exc
        values |= parse_key_values(text.splitlines(), source=str(path))
    values |= parse_key_values(overrides, source="--set")

    model_fields = set(ModelConfig.model_fields)
    train_fields = set(TrainConfig.model_fields)
    unknown = sorted(set(values) - model_fields - train_fields)
    if unknown:
        msg = f"Unknown config keys: {', '.join(unknown)}"
        raise ConfigurationError(msg)

    try:
        model = ModelConfig.model_validate(
            {k: v for k, v in values.items() if k in model_fields},
        )
        train = TrainConfig.model_validate(
            {k: v for k, v in values.items() if k in train_fields},
        )
    except ValidationError as exc:
        msg = f"Invalid configuration: {exc}"
        raise ConfigurationError(msg) from exc

    require_divisible(model.input_size)
    for size in train.train_sizes:
        require_divisible(size)
    logger.debug("Loaded config %s / %s", model, train)
    return model, train


def format_config(model: ModelConfig, train: TrainConfig) -> str:
    """Render both configs back into the key=value format load_config reads."""

    def _render(value: object) -> str:
        if isinstance(value, bool):
            return str(value).lower()
        if isinstance(value, tuple):
            if value and isinstance(value[0], tuple):
                return ",".join(f"{start}:{lr!r}" for start, lr in value)
            return ",".join(str(item) for item in value)
        if value is None:
            return ""
        return str(value)

    lines = [
        f"{name}={_render(value)}"
        for config in (model, train)
        for name, value in config
        if value is not None
    ]
    return "\n".join(lines) + "\n"
