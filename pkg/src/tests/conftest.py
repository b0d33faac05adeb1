"""Pytest configuration and shared fixtures."""

import datetime as dt
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest
import torch

from core.config import ChangeConfig, LearnerConfig, ProbeConfig, ViewsConfig
from core.models import CityRecord, DateSchedule, LocationSample, SeasonalStack
from core.synth import SyntheticWorld

REPO_ROOT = Path(__file__).resolve().parents[2]
TODAY = dt.date(2024, 6, 1)


@pytest.fixture(autouse=True)
def clean_seco_env():
    """Keep SECO_* variables of the developer shell out of every test."""
    with patch.dict('os.environ', {}, clear=False) as env:
        for key in [k for k in env if k.startswith('SECO_')]:
            del env[key]
        yield


@pytest.fixture
def mock_env_seed():
    """Mock environment with a seed override."""
    with patch.dict('os.environ', {'SECO_SEED': '7', 'SECO_LOG_LEVEL': 'debug'}):
        yield


@pytest.fixture
def today() -> dt.date:
    return TODAY


@pytest.fixture
def sample_cities() -> list[CityRecord]:
    """Three mid-latitude cities, already in population order."""
    return [
        CityRecord(name='Alpha', lat=45.0, lon=10.0, population=3_000_000),
        CityRecord(name='Beta', lat=-33.9, lon=18.4, population=2_000_000),
        CityRecord(name='Gamma', lat=35.7, lon=139.7, population=1_000_000),
    ]


@pytest.fixture
def cities_file(tmp_path: Path) -> Path:
    path = tmp_path / 'cities.tsv'
    path.write_text(
        "name\tlat\tlon\tpopulation\n"
        "Small\t10.0\t20.0\t1000\n"
        "Large\t40.0\t-3.7\t6000000\n"
        "Medium\t-23.5\t-46.6\t200000\n",
        encoding='utf-8',
    )
    return path


@pytest.fixture
def world() -> SyntheticWorld:
    return SyntheticWorld(seed=0, patch_size=32, ground_extent_km=1.33)


@pytest.fixture
def anchored_world() -> SyntheticWorld:
    return SyntheticWorld(seed=0, patch_size=32, ground_extent_km=1.33, anchors=[(45.0, 10.0), (-33.9, 18.4)])


def make_stack(world: SyntheticWorld, lat: float, lon: float, start: dt.date, seed: int = 0) -> SeasonalStack:
    """Five cloud-free quarterly patches of one location."""
    dates = tuple(start + dt.timedelta(days=91 * k) for k in range(5))
    patches = tuple(world.render(lat, lon, d, cloud=0.0) for d in dates)
    location = LocationSample(city_index=0, center_lat=patches[0].lat, center_lon=patches[0].lon, rng_seed=seed)
    return SeasonalStack(location=location, patches=patches, schedule=DateSchedule(dates=dates))


@pytest.fixture
def stack(world: SyntheticWorld) -> SeasonalStack:
    return make_stack(world, 45.01, 10.02, dt.date(2022, 1, 10))


@pytest.fixture
def stacks(world: SyntheticWorld) -> list[SeasonalStack]:
    rng = np.random.default_rng(3)
    return [
        make_stack(world, float(rng.uniform(-50, 50)), float(rng.uniform(-170, 170)), dt.date(2022, 2, 1), seed=i)
        for i in range(8)
    ]


@pytest.fixture
def views_config() -> ViewsConfig:
    return ViewsConfig(out_size=16)


@pytest.fixture
def tiny_learner_config() -> LearnerConfig:
    """Micro model: two stages, 8-dim sub-spaces, small queues."""
    return LearnerConfig(
        epochs=2,
        batch_size=4,
        widths=(4, 8),
        proj_dim=8,
        queue_size=16,
        momentum_coef=0.99,
        checkpoint_every=1,
        seed=0,
    )


@pytest.fixture
def probe_config() -> ProbeConfig:
    return ProbeConfig(mode='linear', epochs=5, batch_size=16, seed=0)


@pytest.fixture
def change_config() -> ChangeConfig:
    return ChangeConfig(epochs=2, batch_size=4, patch_size=16, seed=0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def seeded_torch():
    torch.manual_seed(0)
    yield
