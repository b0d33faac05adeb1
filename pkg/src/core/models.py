"""Pydantic models for type safety and validation."""

import datetime as dt
from typing import Any

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class CityRecord(BaseModel):
    """Model for a populated place used as a sampling anchor."""

    model_config = ConfigDict(frozen=True)

    name: str
    lat: float = Field(ge=-90.0, le=90.0)
    lon: float = Field(ge=-180.0, le=180.0)
    population: int = Field(ge=0)


class LocationSample(BaseModel):
    """Model for a sampled ground location.

    ``city_index`` is None for locations drawn by the uniform strategy.
    ``offset_km`` is the (east, north) tangent-plane offset from the city centre.
    """

    model_config = ConfigDict(frozen=True)

    city_index: int | None
    center_lat: float = Field(ge=-90.0, le=90.0)
    center_lon: float = Field(ge=-180.0, le=180.0)
    rng_seed: int
    offset_km: tuple[float, float] = (0.0, 0.0)


class DateSchedule(BaseModel):
    """Model for the five acquisition dates of one location."""

    model_config = ConfigDict(frozen=True)

    dates: tuple[dt.date, ...]
    window_days: int = Field(default=15, ge=0)

    @field_validator('dates')
    @classmethod
    def _five_increasing(cls, dates: tuple[dt.date, ...]) -> tuple[dt.date, ...]:
        if len(dates) != 5:
            raise ValueError(f"a schedule holds exactly 5 dates, got {len(dates)}")
        if any(b <= a for a, b in zip(dates, dates[1:])):
            raise ValueError("schedule dates must be strictly increasing")
        return dates


class CatalogQuery(BaseModel):
    """Model for a single tile catalog lookup."""

    model_config = ConfigDict(frozen=True)

    lat: float = Field(ge=-90.0, le=90.0)
    lon: float = Field(ge=-180.0, le=180.0)
    date_lo: dt.date
    date_hi: dt.date
    max_cloud: float = Field(default=0.10, ge=0.0, le=1.0)

    @model_validator(mode='after')
    def _ordered_window(self) -> 'CatalogQuery':
        if self.date_lo > self.date_hi:
            raise ValueError("date_lo must not be after date_hi")
        return self

    @property
    def center_date(self) -> dt.date:
        return self.date_lo + (self.date_hi - self.date_lo) // 2


class TilePatch(BaseModel):
    """Model for one square RGB image patch.

    ``latent_classes`` is the land-cover class map of synthetic tiles and stays
    None for tiles read from disk.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    pixels: np.ndarray
    lat: float = Field(ge=-90.0, le=90.0)
    lon: float = Field(ge=-180.0, le=180.0)
    date: dt.date
    cloud_fraction: float = Field(ge=0.0, le=1.0)
    ground_extent_km: float = Field(default=2.65, gt=0.0)
    latent_classes: np.ndarray | None = None

    @field_validator('pixels')
    @classmethod
    def _square_rgb_u8(cls, pixels: np.ndarray) -> np.ndarray:
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError(f"pixels must be HxWx3, got shape {pixels.shape}")
        if pixels.shape[0] != pixels.shape[1]:
            raise ValueError(f"pixels must be square, got {pixels.shape[0]}x{pixels.shape[1]}")
        if pixels.dtype != np.uint8:
            raise ValueError(f"pixels must be uint8, got {pixels.dtype}")
        return pixels

    @property
    def size(self) -> int:
        return int(self.pixels.shape[0])


class SeasonalStack(BaseModel):
    """Model for co-located patches captured at five dates."""

    model_config = ConfigDict(frozen=True)

    location: LocationSample
    patches: tuple[TilePatch, ...]
    schedule: DateSchedule

    @model_validator(mode='after')
    def _consistent(self) -> 'SeasonalStack':
        if len(self.patches) != len(self.schedule.dates):
            raise ValueError("one patch per scheduled date is required")
        first = self.patches[0]
        for patch, date in zip(self.patches, self.schedule.dates):
            if (patch.lat, patch.lon, patch.ground_extent_km) != (
                first.lat,
                first.lon,
                first.ground_extent_km,
            ):
                raise ValueError("all patches of a stack must share location and extent")
            if patch.date != date:
                raise ValueError(f"patch dated {patch.date} does not match schedule date {date}")
        return self


class AugmentationParams(BaseModel):
    """Model for one draw of the artificial augmentation family."""

    model_config = ConfigDict(frozen=True)

    crop: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)
    hflip: bool = False
    jitter: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 0.0)
    grayscale: bool = False
    blur_sigma: float = Field(default=0.0, ge=0.0)
    out_size: int = Field(default=64, gt=0)

    @field_validator('crop')
    @classmethod
    def _crop_inside(cls, crop: tuple[float, float, float, float]) -> tuple[float, ...]:
        x, y, w, h = crop
        if not (0.0 < w <= 1.0 and 0.0 < h <= 1.0):
            raise ValueError(f"crop fractions must lie in (0, 1], got w={w}, h={h}")
        if x < 0.0 or y < 0.0 or x + w > 1.0 + 1e-9 or y + h > 1.0 + 1e-9:
            raise ValueError(f"crop {crop} leaves the image")
        return crop

    @field_validator('jitter')
    @classmethod
    def _hue_range(cls, jitter: tuple[float, float, float, float]) -> tuple[float, ...]:
        if not -0.1 - 1e-12 <= jitter[3] <= 0.1 + 1e-12:
            raise ValueError(f"hue offset must lie in [-0.1, 0.1], got {jitter[3]}")
        if min(jitter[:3]) < 0.0:
            raise ValueError("jitter multipliers must be non-negative")
        return jitter

    @property
    def is_identity(self) -> bool:
        return (
            self.crop == (0.0, 0.0, 1.0, 1.0)
            and not self.hflip
            and self.jitter == (1.0, 1.0, 1.0, 0.0)
            and not self.grayscale
            and self.blur_sigma == 0.0
        )


class ViewSet(BaseModel):
    """Model for the query view and the three key views of one location."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    x_q: torch.Tensor
    x_k0: torch.Tensor
    x_k1: torch.Tensor
    x_k2: torch.Tensor
    t_indices: tuple[int, int, int]
    params_k0: AugmentationParams
    params_k2: AugmentationParams

    @field_validator('t_indices')
    @classmethod
    def _distinct(cls, t_indices: tuple[int, int, int]) -> tuple[int, int, int]:
        if len(set(t_indices)) != 3:
            raise ValueError(f"temporal indices must be pairwise distinct, got {t_indices}")
        return t_indices


class PairViews(BaseModel):
    """Model for the two-view input of the single sub-space baselines."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    x_q: torch.Tensor
    x_k: torch.Tensor
    t_indices: tuple[int, int]


class ChangePair(BaseModel):
    """Model for a co-registered image pair with its change mask."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    image_a: np.ndarray
    image_b: np.ndarray
    gt_mask: np.ndarray

    @model_validator(mode='after')
    def _shapes(self) -> 'ChangePair':
        if self.image_a.shape != self.image_b.shape:
            raise ValueError(f"image shapes differ: {self.image_a.shape} vs {self.image_b.shape}")
        if self.gt_mask.shape != self.image_a.shape[:2]:
            raise ValueError("mask must match the spatial size of the images")
        if not np.isin(self.gt_mask, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        return self


class MaskMetrics(BaseModel):
    """Model for precision/recall/F1 of the change class."""

    model_config = ConfigDict(frozen=True)

    precision: float = Field(ge=0.0, le=1.0)
    recall: float = Field(ge=0.0, le=1.0)
    f1: float = Field(ge=0.0, le=1.0)
    tp: int = Field(ge=0)
    fp: int = Field(ge=0)
    fn: int = Field(ge=0)


class ProbeResult(BaseModel):
    """Model for the outcome of a supervised evaluation run."""

    metric_name: str
    metric_value: float
    epoch_of_best: int
    history: list[float] = Field(default_factory=list)
    extra: dict[str, Any] = Field(default_factory=dict)
