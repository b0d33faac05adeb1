"""Tests for the tile catalog backends and the catalog manager."""

import datetime as dt
import json

import numpy as np
import pytest

from core.catalog import (
    INDEX_FILE,
    CatalogError,
    CatalogTransportError,
    LocalDirectoryCatalog,
    SyntheticCatalog,
    TileCatalog,
    write_local_tile,
)
from core.catalog_manager import CatalogManager
from core.models import CatalogQuery


def _query(lat=10.0, lon=20.0, center=dt.date(2021, 6, 15), window=15, max_cloud=0.1):
    delta = dt.timedelta(days=window)
    return CatalogQuery(lat=lat, lon=lon, date_lo=center - delta, date_hi=center + delta, max_cloud=max_cloud)


class TestSyntheticCatalog:
    """Test the synthetic backend."""

    def test_satisfies_protocol(self, world):
        assert isinstance(SyntheticCatalog(world), TileCatalog)

    async def test_zero_cloud_always_answers_at_window_centre(self, world):
        catalog = SyntheticCatalog(world, forced_cloud=0.0)
        patch = await catalog.query(_query())
        assert patch is not None
        assert patch.date == dt.date(2021, 6, 15)
        assert patch.cloud_fraction == 0.0

    async def test_full_cloud_never_answers(self, world):
        catalog = SyntheticCatalog(world, forced_cloud=1.0)
        assert await catalog.query(_query()) is None
        assert catalog.queries == 1

    async def test_returns_clear_day_nearest_centre(self, world):
        catalog = SyntheticCatalog(world)
        query = _query(max_cloud=0.1)
        patch = await catalog.query(query)
        if patch is None:
            pytest.skip("no clear day in this window")
        assert query.date_lo <= patch.date <= query.date_hi
        assert patch.cloud_fraction < 0.1
        distance = abs((patch.date - query.center_date).days)
        for offset in range(distance):
            for day in (query.center_date - dt.timedelta(days=offset), query.center_date + dt.timedelta(days=offset)):
                assert world.cloud_fraction(query.lat, query.lon, day) >= 0.1

    async def test_zero_window_only_checks_one_day(self, world):
        catalog = SyntheticCatalog(world, forced_cloud=0.0)
        patch = await catalog.query(_query(window=0))
        assert patch is not None and patch.date == dt.date(2021, 6, 15)


class TestLocalDirectoryCatalog:
    """Test the on-disk backend."""

    async def test_round_trip_through_index(self, tmp_path, world):
        patch = world.render(10.0, 20.0, dt.date(2021, 6, 10), cloud=0.0)
        write_local_tile(tmp_path, patch)
        catalog = LocalDirectoryCatalog(tmp_path)
        found = await catalog.query(_query())
        assert found is not None
        assert np.array_equal(found.pixels, patch.pixels)
        assert found.date == patch.date

    async def test_cloud_filter_and_nearest_date(self, tmp_path, world):
        for day, cloud in ((dt.date(2021, 6, 14), 0.5), (dt.date(2021, 6, 20), 0.0), (dt.date(2021, 6, 5), 0.05)):
            write_local_tile(tmp_path, world.render(10.0, 20.0, day, cloud=cloud))
        found = await LocalDirectoryCatalog(tmp_path).query(_query())
        assert found is not None
        assert found.date == dt.date(2021, 6, 20)

    async def test_other_location_misses(self, tmp_path, world):
        write_local_tile(tmp_path, world.render(10.0, 20.0, dt.date(2021, 6, 15), cloud=0.0))
        assert await LocalDirectoryCatalog(tmp_path).query(_query(lat=10.001)) is None

    def test_missing_index(self, tmp_path):
        with pytest.raises(CatalogError, match='not found'):
            LocalDirectoryCatalog(tmp_path)

    def test_malformed_index_names_line(self, tmp_path):
        (tmp_path / INDEX_FILE).write_text(
            json.dumps({'path': 'a.png', 'lat': 0, 'lon': 0, 'date': '2021-01-01', 'cloud_fraction': 0}) + '\n'
            + '{"path": "b.png"}\n',
            encoding='utf-8',
        )
        with pytest.raises(CatalogError, match='line 2'):
            LocalDirectoryCatalog(tmp_path)

    async def test_unreadable_tile_is_transport_error(self, tmp_path, world):
        write_local_tile(tmp_path, world.render(10.0, 20.0, dt.date(2021, 6, 15), cloud=0.0))
        for png in tmp_path.glob('*.png'):
            png.write_bytes(b'not a png')
        with pytest.raises(CatalogTransportError):
            await LocalDirectoryCatalog(tmp_path).query(_query())


class TestCatalogManager:
    """Test backend selection."""

    def test_explicit_synthetic(self):
        catalog = CatalogManager(patch_size=16).get_catalog('synthetic')
        assert isinstance(catalog, SyntheticCatalog)
        assert catalog.world.patch_size == 16

    def test_env_fallback(self, tmp_path, world, monkeypatch):
        write_local_tile(tmp_path, world.render(1.0, 2.0, dt.date(2021, 1, 1), cloud=0.0))
        monkeypatch.setenv('SECO_CATALOG', 'local')
        monkeypatch.setenv('SECO_CATALOG_DIR', str(tmp_path))
        manager = CatalogManager()
        catalog = manager.get_catalog()
        assert isinstance(catalog, LocalDirectoryCatalog)
        assert manager.get_catalog() is catalog

    def test_local_needs_directory(self):
        with pytest.raises(ValueError, match='needs a directory'):
            CatalogManager().get_catalog('local')

    def test_unknown_backend(self):
        with pytest.raises(ValueError, match='Unknown catalog backend'):
            CatalogManager().get_catalog('earth-engine')
