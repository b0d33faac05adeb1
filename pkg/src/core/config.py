"""Run configuration: sectioned YAML files validated by pydantic models."""

import datetime as dt
import os
from pathlib import Path
from typing import Any, Literal

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

# Coarse continental boxes (lat_min, lat_max, lon_min, lon_max) for the uniform arm.
DEFAULT_LAND_BOXES: list[tuple[float, float, float, float]] = [
    (25.0, 70.0, -125.0, -60.0),  # North America
    (-55.0, 12.0, -80.0, -35.0),  # South America
    (36.0, 70.0, -10.0, 40.0),  # Europe
    (-35.0, 35.0, -17.0, 50.0),  # Africa
    (10.0, 70.0, 40.0, 140.0),  # Asia
    (-10.0, 10.0, 95.0, 150.0),  # Maritime south-east Asia
    (-38.0, -12.0, 114.0, 153.0),  # Australia
]


class ConfigError(Exception):
    """Raised for unreadable files, unknown keys and invalid values."""

    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid', validate_assignment=True)


class SamplerConfig(_Section):
    """Dataset collection settings."""

    n_locations: int = Field(default=100, gt=0)
    sigma_km: float = Field(default=50.0, ge=0.0)
    max_cloud: float = Field(default=0.10, ge=0.0, le=1.0)
    window_days: int = Field(default=15, ge=0)
    jitter_days: int = Field(default=365, ge=0, le=365)
    strategy: Literal['gaussian', 'uniform'] = 'gaussian'
    cities_path: str = 'data/cities.tsv'
    top_n_cities: int = Field(default=10_000, gt=0)
    land_boxes: list[tuple[float, float, float, float]] = Field(
        default_factory=lambda: list(DEFAULT_LAND_BOXES)
    )
    catalog: Literal['synthetic', 'local'] = 'synthetic'
    catalog_dir: str | None = None
    world_seed: int = 0
    anchor_diversity: bool = True
    patch_size: int = Field(default=64, gt=0)
    ground_extent_km: float = Field(default=2.65, gt=0.0)
    today: dt.date | None = None
    concurrency: int = Field(default=4, gt=0)
    max_attempts_per_location: int = Field(default=1000, gt=0)
    retries: int = Field(default=3, ge=0)
    retry_backoff_s: float = Field(default=0.5, ge=0.0)

    @field_validator('land_boxes')
    @classmethod
    def _boxes(cls, boxes: list[tuple[float, float, float, float]]) -> list[tuple[float, ...]]:
        for lat_lo, lat_hi, lon_lo, lon_hi in boxes:
            if not (-90.0 <= lat_lo < lat_hi <= 90.0 and -180.0 <= lon_lo < lon_hi <= 180.0):
                raise ValueError(f"invalid land box {(lat_lo, lat_hi, lon_lo, lon_hi)}")
        return boxes

    @model_validator(mode='after')
    def _backend_inputs(self) -> 'SamplerConfig':
        if self.catalog == 'local' and not (self.catalog_dir and self.catalog_dir.strip()):
            raise ValueError("the local catalog needs sampler.catalog_dir (--catalog-dir or SECO_CATALOG_DIR)")
        if self.strategy == 'uniform' and not self.land_boxes:
            raise ValueError("the uniform strategy needs at least one sampler.land_boxes entry")
        return self


class ViewsConfig(_Section):
    """Artificial augmentation family (MoCo-v2 defaults)."""

    out_size: int = Field(default=64, gt=0)
    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_ratio: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    hflip_p: float = Field(default=0.5, ge=0.0, le=1.0)
    jitter_p: float = Field(default=0.8, ge=0.0, le=1.0)
    brightness: float = Field(default=0.4, ge=0.0, lt=1.0)
    contrast: float = Field(default=0.4, ge=0.0, lt=1.0)
    saturation: float = Field(default=0.4, ge=0.0, lt=1.0)
    hue: float = Field(default=0.1, ge=0.0, le=0.1)
    grayscale_p: float = Field(default=0.2, ge=0.0, le=1.0)
    blur_p: float = Field(default=0.5, ge=0.0, le=1.0)
    blur_sigma: tuple[float, float] = (0.1, 2.0)

    @field_validator('crop_scale')
    @classmethod
    def _scale(cls, scale: tuple[float, float]) -> tuple[float, float]:
        if not 0.0 < scale[0] <= scale[1] <= 1.0:
            raise ValueError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {scale}")
        return scale

    @field_validator('crop_ratio')
    @classmethod
    def _ratio(cls, ratio: tuple[float, float]) -> tuple[float, float]:
        if not 0.0 < ratio[0] <= ratio[1]:
            raise ValueError(f"crop_ratio must satisfy 0 < lo <= hi, got {ratio}")
        return ratio

    @field_validator('blur_sigma')
    @classmethod
    def _sigma(cls, sigma: tuple[float, float]) -> tuple[float, float]:
        if not 0.1 <= sigma[0] <= sigma[1] <= 2.0:
            raise ValueError(f"blur_sigma must lie inside [0.1, 2.0], got {sigma}")
        return sigma


class TrainConfig(_Section):
    """Optimisation schedule of the pre-training loop."""

    epochs: int = Field(default=200, gt=0)
    batch_size: int = Field(default=256, gt=0)
    base_lr: float = Field(default=0.03, ge=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    milestones: tuple[float, ...] = (0.6, 0.8)
    lr_decay: float = Field(default=0.1, gt=0.0)
    seed: int = 0

    @field_validator('milestones')
    @classmethod
    def _milestones(cls, milestones: tuple[float, ...]) -> tuple[float, ...]:
        if any(not 0.0 < m < 1.0 for m in milestones):
            raise ValueError(f"milestones must lie in (0, 1), got {milestones}")
        if any(b <= a for a, b in zip(milestones, milestones[1:])):
            raise ValueError(f"milestones must be increasing, got {milestones}")
        return milestones


class LearnerConfig(TrainConfig):
    """Model, contrastive objective and training schedule."""

    widths: tuple[int, ...] = (16, 32, 64, 128)
    proj_dim: int = Field(default=128, gt=0)
    queue_size: int = Field(default=16_384, gt=0)
    temperature: float = Field(default=0.07, gt=0.0)
    momentum_coef: float = Field(default=0.999, ge=0.0, le=1.0)
    method: Literal['seco', 'moco', 'moco_tp'] = 'seco'
    multi_positive_z0: bool = False
    checkpoint_every: int = Field(default=10, gt=0)

    @field_validator('widths')
    @classmethod
    def _widths(cls, widths: tuple[int, ...]) -> tuple[int, ...]:
        if not widths or any(w <= 0 for w in widths):
            raise ValueError(f"widths must be a non-empty tuple of positive ints, got {widths}")
        return widths

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    @property
    def num_subspaces(self) -> int:
        return 3 if self.method == 'seco' else 1


class ProbeConfig(_Section):
    """Supervised evaluation protocol (linear probing or fine-tuning)."""

    mode: Literal['linear', 'finetune'] = 'linear'
    epochs: int = Field(default=100, ge=0)
    batch_size: int = Field(default=64, gt=0)
    lr: float | None = None
    milestones: tuple[float, ...] = (0.6, 0.8)
    lr_decay: float = Field(default=0.1, gt=0.0)
    seed: int = 0

    @property
    def effective_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return 1e-3 if self.mode == 'linear' else 1e-5


class ChangeConfig(_Section):
    """Change-detection decoder training settings."""

    epochs: int = Field(default=100, ge=0)
    batch_size: int = Field(default=32, gt=0)
    lr: float = Field(default=1e-3, gt=0.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    lr_gamma: float = Field(default=0.95, gt=0.0, le=1.0)
    dropout: float = Field(default=0.3, ge=0.0, lt=1.0)
    patch_size: int = Field(default=96, gt=0)
    augment: bool = True
    seed: int = 0


class EvalConfig(_Section):
    """Downstream evaluation settings."""

    mode: Literal['linear', 'finetune'] = 'linear'
    epochs: int = Field(default=100, ge=0)
    batch_size: int = Field(default=64, gt=0)
    lr: float | None = None
    milestones: tuple[float, ...] = (0.6, 0.8)
    lr_decay: float = Field(default=0.1, gt=0.0)
    fractions: tuple[float, ...] = (0.01, 0.1, 0.5, 1.0)
    seeds: tuple[int, ...] = (0, 1, 2)
    schema_kind: Literal['multilabel', 'multiclass'] = 'multilabel'
    presence_threshold: float = Field(default=0.05, gt=0.0, le=1.0)
    n_train: int = Field(default=512, gt=0)
    n_val: int = Field(default=256, gt=0)
    dataset_dir: str | None = None
    change_epochs: int = Field(default=100, ge=0)
    change_batch_size: int = Field(default=32, gt=0)
    change_lr: float = Field(default=1e-3, gt=0.0)
    change_weight_decay: float = Field(default=1e-4, ge=0.0)
    change_lr_gamma: float = Field(default=0.95, gt=0.0, le=1.0)
    change_dropout: float = Field(default=0.3, ge=0.0, lt=1.0)
    change_patch_size: int = Field(default=96, gt=0)
    n_change_train: int = Field(default=14, gt=0)
    n_change_val: int = Field(default=10, ge=0)

    @field_validator('fractions')
    @classmethod
    def _fractions(cls, fractions: tuple[float, ...]) -> tuple[float, ...]:
        if not fractions or any(not 0.0 < f <= 1.0 for f in fractions):
            raise ValueError(f"fractions must lie in (0, 1], got {fractions}")
        return fractions

    def probe_config(self, mode: str | None = None, seed: int = 0) -> ProbeConfig:
        return ProbeConfig(
            mode=mode or self.mode,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            milestones=self.milestones,
            lr_decay=self.lr_decay,
            seed=seed,
        )

    def change_config(self, seed: int = 0) -> ChangeConfig:
        return ChangeConfig(
            epochs=self.change_epochs,
            batch_size=self.change_batch_size,
            lr=self.change_lr,
            weight_decay=self.change_weight_decay,
            lr_gamma=self.change_lr_gamma,
            dropout=self.change_dropout,
            patch_size=self.change_patch_size,
            seed=seed,
        )


class IOConfig(_Section):
    """Artifact locations, relative to the working directory."""

    dataset_dir: str = 'dataset'
    runs_dir: str = 'runs'
    results_dir: str = 'results'
    checkpoint: str | None = None
    log_level: str = 'INFO'
    deterministic: bool = True


class RunConfig(_Section):
    """Complete configuration of a run."""

    seed: int = 0
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    views: ViewsConfig = Field(default_factory=ViewsConfig)
    learner: LearnerConfig = Field(default_factory=LearnerConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    io: IOConfig = Field(default_factory=IOConfig)

    @model_validator(mode='after')
    def _propagate_seed(self) -> 'RunConfig':
        if self.learner.seed != self.seed:
            self.learner = self.learner.model_copy(update={'seed': self.seed})
        return self


def _format_validation_error(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        where = '.'.join(str(p) for p in item['loc']) or '<root>'
        lines.append(f"{where}: {item['msg']}")
    return '; '.join(lines)


def _set_dotted(data: dict[str, Any], dotted: str, value: Any) -> None:
    parts = dotted.split('.')
    node = data
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"cannot set '{dotted}': '{part}' is not a section")
        node = child
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    """Split a ``section.key=value`` override; the value is parsed as YAML scalar."""
    if '=' not in text:
        raise ConfigError(f"override '{text}' must look like section.key=value")
    key, raw = text.split('=', 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override '{text}' has an empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse value of override '{text}': {str(e)}") from e
    return key, value


def load_config(
    path: str | Path | None = None,
    overrides: dict[str, Any] | None = None,
    env: bool = True,
) -> tuple[RunConfig, str | None]:
    """Load, merge and validate a run configuration.

    Args:
        path: YAML config file; None uses the documented defaults.
        overrides: dotted ``section.key`` values, applied last.
        env: whether ``.env`` / ``SECO_*`` environment variables apply.

    Returns:
        The validated config and the verbatim source text (None without a file).

    Raises:
        ConfigError: unreadable file, unknown keys or invalid values.
    """
    data: dict[str, Any] = {}
    source: str | None = None
    if path is not None:
        try:
            source = Path(path).read_text(encoding='utf-8')
            loaded = yaml.safe_load(source)
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {str(e)}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {path} is not valid YAML: {str(e)}") from e
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must contain a mapping of sections")
        data = loaded or {}

    if env:
        load_dotenv()
        seed = os.getenv("SECO_SEED")
        if seed is not None and seed.strip():
            try:
                data['seed'] = int(seed)
            except ValueError as e:
                raise ConfigError(f"SECO_SEED must be an integer, got '{seed}'") from e
        catalog = os.getenv("SECO_CATALOG")
        if catalog and catalog.strip():
            _set_dotted(data, 'sampler.catalog', catalog.strip())
        catalog_dir = os.getenv("SECO_CATALOG_DIR")
        if catalog_dir and catalog_dir.strip():
            _set_dotted(data, 'sampler.catalog_dir', catalog_dir.strip())
        log_level = os.getenv("SECO_LOG_LEVEL")
        if log_level and log_level.strip():
            _set_dotted(data, 'io.log_level', log_level.strip().upper())

    for key, value in (overrides or {}).items():
        _set_dotted(data, key, value)

    try:
        return RunConfig.model_validate(data), source
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {_format_validation_error(e)}") from e


def dump_config(config: RunConfig) -> str:
    """Render a resolved config as YAML text."""
    return yaml.safe_dump(config.model_dump(mode='json'), sort_keys=False)


def write_config_echo(config: RunConfig, source: str | None, out_dir: str | Path) -> None:
    """Write the resolved config (and the verbatim source, if any) into an artifact dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / 'run_config.yaml').write_text(dump_config(config), encoding='utf-8')
    if source is not None:
        (out / 'config.source.yaml').write_text(source, encoding='utf-8')


def paper_scale_config() -> RunConfig:
    """The full-size pre-training configuration (not run at desk scale)."""
    return RunConfig(
        sampler=SamplerConfig(n_locations=200_000, patch_size=264),
        views=ViewsConfig(out_size=224),
        learner=LearnerConfig(
            epochs=200,
            batch_size=256,
            base_lr=0.03,
            momentum=0.9,
            weight_decay=1e-4,
            widths=(64, 128, 256, 512),
            proj_dim=128,
            queue_size=16_384,
            temperature=0.07,
            momentum_coef=0.999,
        ),
    )
