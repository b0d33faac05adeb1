"""Tile catalog backends with proper error handling and type safety."""

import datetime as dt
import json
import logging
from collections.abc import Iterator
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
from PIL import Image

from .models import CatalogQuery, TilePatch
from .synth import SyntheticWorld, round_coord

logger = logging.getLogger(__name__)

INDEX_FILE = 'index.jsonl'


class CatalogError(Exception):
    """Base exception for tile catalog errors."""

    pass


class CatalogTransportError(CatalogError):
    """A lookup failed for reasons that may succeed on retry."""

    pass


class CatalogUnavailableError(CatalogError):
    """The catalog stayed unreachable after every retry."""

    pass


@runtime_checkable
class TileCatalog(Protocol):
    """Anything that can answer a CatalogQuery with a patch or nothing."""

    async def query(self, query: CatalogQuery) -> TilePatch | None: ...


def _days_by_distance(query: CatalogQuery) -> Iterator[dt.date]:
    """Window days ordered by distance from the window centre, earlier day first on ties."""
    center = query.center_date
    span = max((center - query.date_lo).days, (query.date_hi - center).days)
    yield center
    for offset in range(1, span + 1):
        for day in (center - dt.timedelta(days=offset), center + dt.timedelta(days=offset)):
            if query.date_lo <= day <= query.date_hi:
                yield day


class SyntheticCatalog:
    """Catalog backed by a SyntheticWorld.

    Every day of the window is an acquisition; the one closest to the window
    centre whose cloud fraction is below ``max_cloud`` is returned.
    ``forced_cloud`` pins the cloud fraction of every acquisition.
    """

    def __init__(self, world: SyntheticWorld, forced_cloud: float | None = None):
        self.world = world
        self.forced_cloud = forced_cloud
        self.queries = 0

    def _cloud(self, query: CatalogQuery, day: dt.date) -> float:
        if self.forced_cloud is not None:
            return self.forced_cloud
        return self.world.cloud_fraction(query.lat, query.lon, day)

    async def query(self, query: CatalogQuery) -> TilePatch | None:
        """Return the clearest-enough acquisition nearest the window centre.

        Args:
            query: location, date window and cloud threshold

        Returns:
            The rendered patch, or None when no acquisition passes the cloud filter
        """
        self.queries += 1
        for day in _days_by_distance(query):
            cloud = self._cloud(query, day)
            if cloud < query.max_cloud:
                return self.world.render(query.lat, query.lon, day, cloud=cloud)
        return None


class LocalDirectoryCatalog:
    """Catalog over a directory of PNG tiles listed in ``index.jsonl``.

    Each index row holds ``path, lat, lon, date, cloud_fraction`` and optionally
    ``ground_extent_km``; a row matches a query when its location agrees to 1e-4°.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        index = self.root / INDEX_FILE
        if not index.exists():
            raise CatalogError(f"Catalog index {index} not found")
        self._rows: dict[tuple[float, float], list[dict]] = {}
        line_no = 0
        try:
            with index.open(encoding='utf-8') as f:
                for line_no, line in enumerate(f, start=1):
                    if not line.strip():
                        continue
                    row = json.loads(line)
                    row['date'] = dt.date.fromisoformat(row['date'])
                    key = (round_coord(row['lat']), round_coord(row['lon']))
                    self._rows.setdefault(key, []).append(row)
        except (ValueError, KeyError) as e:
            raise CatalogError(f"Malformed catalog index {index} at line {line_no}: {str(e)}") from e
        logger.debug("Loaded %d catalog locations from %s", len(self._rows), index)

    async def query(self, query: CatalogQuery) -> TilePatch | None:
        """Return the tile nearest the window centre that passes the cloud filter."""
        rows = self._rows.get((round_coord(query.lat), round_coord(query.lon)), [])
        candidates = [
            r
            for r in rows
            if query.date_lo <= r['date'] <= query.date_hi and r['cloud_fraction'] < query.max_cloud
        ]
        if not candidates:
            return None
        center = query.center_date
        best = min(candidates, key=lambda r: (abs((r['date'] - center).days), r['date']))
        try:
            with Image.open(self.root / best['path']) as img:
                pixels = np.asarray(img.convert('RGB'), dtype=np.uint8)
        except OSError as e:
            raise CatalogTransportError(f"Failed to read tile {best['path']}: {str(e)}") from e
        return TilePatch(
            pixels=pixels,
            lat=round_coord(best['lat']),
            lon=round_coord(best['lon']),
            date=best['date'],
            cloud_fraction=float(best['cloud_fraction']),
            ground_extent_km=float(best.get('ground_extent_km', 2.65)),
        )


def write_local_tile(root: str | Path, patch: TilePatch) -> dict:
    """Store a patch as PNG under ``root`` and append it to the catalog index."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    name = f"{patch.lat:+09.4f}_{patch.lon:+010.4f}_{patch.date.isoformat()}.png"
    Image.fromarray(patch.pixels).save(root / name)
    row = {
        'path': name,
        'lat': patch.lat,
        'lon': patch.lon,
        'date': patch.date.isoformat(),
        'cloud_fraction': patch.cloud_fraction,
        'ground_extent_km': patch.ground_extent_km,
    }
    with (root / INDEX_FILE).open('a', encoding='utf-8') as f:
        f.write(json.dumps(row) + '\n')
    return row
