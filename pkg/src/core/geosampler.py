"""Unsupervised collection of seasonal image stacks around populated places."""

import asyncio
import calendar
import datetime as dt
import json
import logging
import math
import shutil
import time
from collections.abc import Sequence
from pathlib import Path
from typing import Any, Literal

import numpy as np
from PIL import Image
from tenacity import (
    AsyncRetrying,
    before_sleep_log,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
    wait_random,
)
from tqdm import tqdm

from .catalog import CatalogTransportError, CatalogUnavailableError, TileCatalog
from .models import CatalogQuery, CityRecord, DateSchedule, LocationSample, SeasonalStack, TilePatch
from .synth import KM_PER_DEG, N_CLASSES, latent_histogram

logger = logging.getLogger(__name__)

MANIFEST = 'manifest.jsonl'
CITY_HEADER = ('name', 'lat', 'lon', 'population')
POLAR_COS_LIMIT = 1e-6


class CityFileError(Exception):
    """Raised when a cities file is missing, empty or malformed."""

    pass


def load_cities(path: str | Path, top_n: int = 10_000) -> list[CityRecord]:
    """Load a ``name<TAB>lat<TAB>lon<TAB>population`` file.

    Args:
        path: UTF-8 TSV file with a header row
        top_n: number of most populated cities to keep

    Returns:
        Records sorted by population, most populated first (file order on ties)

    Raises:
        CityFileError: missing or empty file, bad header, malformed row
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding='utf-8').splitlines()
    except OSError as e:
        raise CityFileError(f"Cannot read cities file {path}: {str(e)}") from e
    if not lines or not lines[0].strip():
        raise CityFileError(f"Cities file {path} is empty")

    header = tuple(h.strip().lower() for h in lines[0].split('\t'))
    if header != CITY_HEADER:
        raise CityFileError(f"Cities file header must be {'<TAB>'.join(CITY_HEADER)}, line 1")

    cities: list[CityRecord] = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split('\t')
        if len(fields) != 4:
            raise CityFileError(f"expected 4 tab-separated fields, got {len(fields)}, line {line_no}")
        name, lat_s, lon_s, pop_s = (f.strip() for f in fields)
        try:
            lat, lon, population = float(lat_s), float(lon_s), int(pop_s)
        except ValueError as e:
            raise CityFileError(f"non-numeric coordinate or population, line {line_no}") from e
        if not -90.0 <= lat <= 90.0:
            raise CityFileError(f"latitude out of range, line {line_no}")
        if not -180.0 <= lon <= 180.0:
            raise CityFileError(f"longitude out of range, line {line_no}")
        if population < 0:
            raise CityFileError(f"negative population, line {line_no}")
        cities.append(CityRecord(name=name, lat=lat, lon=lon, population=population))

    if not cities:
        raise CityFileError(f"Cities file {path} has no data rows")
    cities.sort(key=lambda c: c.population, reverse=True)
    return cities[:top_n]


def _as_generator(rng: np.random.Generator | int) -> tuple[np.random.Generator, int]:
    """Derive a per-sample seed so that every sample can be replayed on its own."""
    if isinstance(rng, np.random.Generator):
        seed = int(rng.integers(0, 2**63 - 1))
    else:
        seed = int(rng)
    return np.random.default_rng(seed), seed


def _wrap_lon(lon: float) -> float:
    wrapped = (lon + 180.0) % 360.0 - 180.0
    return 180.0 if wrapped == -180.0 and lon > 0 else wrapped


def offset_to_degrees(lat: float, east_km: float, north_km: float) -> tuple[float, float]:
    """Local tangent-plane conversion of a km offset into (dlat, dlon) degrees.

    Near the poles (cos(lat) < 1e-6) the longitude offset is dropped.
    """
    dlat = north_km / KM_PER_DEG
    cos_lat = math.cos(math.radians(lat))
    if abs(cos_lat) < POLAR_COS_LIMIT:
        logger.warning("Polar city at lat=%.4f: longitude offset dropped", lat)
        return dlat, 0.0
    return dlat, east_km / (KM_PER_DEG * cos_lat)


def sample_location(
    cities: Sequence[CityRecord], sigma_km: float, rng: np.random.Generator | int
) -> LocationSample:
    """Pick a city uniformly and offset it by an isotropic Gaussian in km."""
    if not cities:
        raise ValueError("cannot sample a location from an empty city list")
    if sigma_km < 0:
        raise ValueError(f"sigma_km must be non-negative, got {sigma_km}")
    gen, seed = _as_generator(rng)
    index = int(gen.integers(len(cities)))
    city = cities[index]
    east_km, north_km = (float(v) for v in gen.normal(0.0, sigma_km, size=2))
    dlat, dlon = offset_to_degrees(city.lat, east_km, north_km)
    lat = min(90.0, max(-90.0, city.lat + dlat))
    lon = _wrap_lon(city.lon + dlon)
    return LocationSample(
        city_index=index,
        center_lat=lat,
        center_lon=lon,
        rng_seed=seed,
        offset_km=(east_km, north_km),
    )


def sample_uniform_location(
    boxes: Sequence[tuple[float, float, float, float]], rng: np.random.Generator | int
) -> LocationSample:
    """Uniform location on the sphere inside one of the land boxes (area weighted)."""
    if not boxes:
        raise ValueError("cannot sample a uniform location without land boxes")
    gen, seed = _as_generator(rng)
    areas = np.array(
        [
            math.radians(lon_hi - lon_lo) * (math.sin(math.radians(lat_hi)) - math.sin(math.radians(lat_lo)))
            for lat_lo, lat_hi, lon_lo, lon_hi in boxes
        ]
    )
    lat_lo, lat_hi, lon_lo, lon_hi = boxes[int(gen.choice(len(boxes), p=areas / areas.sum()))]
    z = gen.uniform(math.sin(math.radians(lat_lo)), math.sin(math.radians(lat_hi)))
    lat = math.degrees(math.asin(z))
    lon = float(gen.uniform(lon_lo, lon_hi))
    return LocationSample(city_index=None, center_lat=lat, center_lon=lon, rng_seed=seed)


def add_months(date: dt.date, months: int) -> dt.date:
    """Calendar month arithmetic, clamping the day to the target month's length."""
    month_index = date.month - 1 + months
    year = date.year + month_index // 12
    month = month_index % 12 + 1
    day = min(date.day, calendar.monthrange(year, month)[1])
    return dt.date(year, month, day)


def build_date_schedule(
    rng: np.random.Generator | int, today: dt.date, jitter_days: int, window_days: int = 15
) -> DateSchedule:
    """Reference date over the past year plus 3-monthly increments.

    The reference is drawn uniformly from [today - 365d - jitter, today - 365d];
    when the +12 month date would not fall strictly before ``today`` the whole
    schedule moves back one day at a time until it does.
    """
    if not 0 <= jitter_days <= 365:
        raise ValueError(f"jitter_days must lie in [0, 365], got {jitter_days}")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(int(rng))
    reference = today - dt.timedelta(days=365 + int(gen.integers(0, jitter_days + 1)))
    while add_months(reference, 12) >= today:
        reference -= dt.timedelta(days=1)
    dates = tuple(add_months(reference, 3 * k) for k in range(5))
    return DateSchedule(dates=dates, window_days=window_days)


def seasonal_gap_violations(dates: Sequence[dt.date], window_days: int) -> list[int]:
    """Indices ``k`` where ``dates[k]`` is more than ``window_days`` away from 3 months after ``dates[k-1]``."""
    return [
        k
        for k in range(1, len(dates))
        if abs((dates[k] - add_months(dates[k - 1], 3)).days) > window_days
    ]


async def acquire_stack(
    catalog: TileCatalog,
    loc: LocationSample,
    sched: DateSchedule,
    max_cloud: float = 0.10,
    window_days: int = 15,
) -> SeasonalStack | None:
    """Query every scheduled date; all five must yield a clear patch.

    After the first date, each query window is the scheduled window intersected
    with ``add_months(previous acquisition, 3) ± window_days``, so consecutive
    acquisitions stay 3 calendar months apart within the window.

    Returns:
        The stack, or None (rejection) as soon as one date has no valid tile

    Raises:
        CatalogTransportError: the catalog failed to answer (retryable)
    """
    patches: list[TilePatch] = []
    window = dt.timedelta(days=window_days)
    for date in sched.dates:
        date_lo, date_hi = date - window, date + window
        if patches:
            follow = add_months(patches[-1].date, 3)
            date_lo, date_hi = max(date_lo, follow - window), min(date_hi, follow + window)
            if date_lo > date_hi:
                return None
        query = CatalogQuery(
            lat=loc.center_lat,
            lon=loc.center_lon,
            date_lo=date_lo,
            date_hi=date_hi,
            max_cloud=max_cloud,
        )
        try:
            patch = await catalog.query(query)
        except CatalogTransportError:
            raise
        except Exception as e:
            raise CatalogTransportError(
                f"Catalog query failed at ({loc.center_lat:.4f}, {loc.center_lon:.4f}) {date}: {str(e)}"
            ) from e
        if patch is None or patch.cloud_fraction >= max_cloud:
            return None
        if not date_lo <= patch.date <= date_hi:
            logger.warning("Catalog answered %s outside [%s, %s], rejecting location", patch.date, date_lo, date_hi)
            return None
        patches.append(patch)
    acquired = DateSchedule(dates=tuple(p.date for p in patches), window_days=window_days)
    return SeasonalStack(location=loc, patches=tuple(patches), schedule=acquired)


def location_dir_name(index: int) -> str:
    return f"loc{index:06d}"


def stack_meta(
    stack: SeasonalStack, nominal: DateSchedule, strategy: str, attempts: int
) -> dict[str, Any]:
    """meta.json payload of a persisted stack."""
    first = stack.patches[0]
    histogram = (
        latent_histogram(first.latent_classes, N_CLASSES) if first.latent_classes is not None else None
    )
    return {
        'lat': first.lat,
        'lon': first.lon,
        'dates': [p.date.isoformat() for p in stack.patches],
        'nominal_dates': [d.isoformat() for d in nominal.dates],
        'window_days': nominal.window_days,
        'cloud_fractions': [p.cloud_fraction for p in stack.patches],
        'city_index': stack.location.city_index,
        'seed': stack.location.rng_seed,
        'offset_km': list(stack.location.offset_km),
        'ground_extent_km': first.ground_extent_km,
        'strategy': strategy,
        'attempts': attempts,
        'latent_label_histogram': histogram,
    }


def write_stack(root: Path, index: int, stack: SeasonalStack, meta: dict[str, Any]) -> Path:
    """Persist a stack atomically: write into a temp dir, then rename."""
    final = root / location_dir_name(index)
    tmp = root / f".tmp_{location_dir_name(index)}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    for t, patch in enumerate(stack.patches):
        Image.fromarray(patch.pixels).save(tmp / f"t{t}.png")
    (tmp / 'meta.json').write_text(json.dumps(meta, indent=2), encoding='utf-8')
    tmp.rename(final)
    return final


def _is_complete(root: Path, index: int) -> bool:
    loc = root / location_dir_name(index)
    return (loc / 'meta.json').exists() and all((loc / f"t{t}.png").exists() for t in range(5))


def load_manifest(root: str | Path) -> list[dict[str, Any]]:
    """Read ``manifest.jsonl`` rows in location order."""
    path = Path(root) / MANIFEST
    if not path.exists():
        return []
    with path.open(encoding='utf-8') as f:
        return [json.loads(line) for line in f if line.strip()]


def rewrite_manifest(root: str | Path) -> list[dict[str, Any]]:
    """Rebuild the manifest from the completed location directories, in index order."""
    root = Path(root)
    rows = []
    for loc in sorted(root.glob('loc[0-9]*')):
        meta_path = loc / 'meta.json'
        if not meta_path.exists():
            continue
        row = json.loads(meta_path.read_text(encoding='utf-8'))
        row['path'] = loc.name
        rows.append(row)
    tmp = root / f".{MANIFEST}.tmp"
    tmp.write_text(''.join(json.dumps(r, sort_keys=True) + '\n' for r in rows), encoding='utf-8')
    tmp.replace(root / MANIFEST)
    return rows


def load_stack(root: str | Path, row: dict[str, Any]) -> SeasonalStack:
    """Load a persisted stack back into memory."""
    loc_dir = Path(root) / row['path']
    dates = tuple(dt.date.fromisoformat(d) for d in row['dates'])
    patches = []
    for t, date in enumerate(dates):
        with Image.open(loc_dir / f"t{t}.png") as img:
            pixels = np.asarray(img.convert('RGB'), dtype=np.uint8)
        patches.append(
            TilePatch(
                pixels=pixels,
                lat=row['lat'],
                lon=row['lon'],
                date=date,
                cloud_fraction=row['cloud_fractions'][t],
                ground_extent_km=row.get('ground_extent_km', 2.65),
            )
        )
    location = LocationSample(
        city_index=row['city_index'],
        center_lat=row['lat'],
        center_lon=row['lon'],
        rng_seed=row['seed'],
        offset_km=tuple(row.get('offset_km', (0.0, 0.0))),
    )
    return SeasonalStack(
        location=location,
        patches=tuple(patches),
        schedule=DateSchedule(dates=dates, window_days=row.get('window_days', 15)),
    )


class SeasonalStackDataset:
    """Indexable view over a built dataset; stacks are read lazily and kept once loaded."""

    def __init__(self, root: str | Path, rows: list[dict[str, Any]] | None = None, cache: bool = True):
        self.root = Path(root)
        if rows is None and not (self.root / MANIFEST).exists():
            raise FileNotFoundError(f"No dataset manifest at {self.root / MANIFEST}")
        self.rows = rows if rows is not None else load_manifest(self.root)
        if not self.rows:
            raise ValueError(f"Dataset at {self.root} has no manifest rows")
        self._cache: dict[int, SeasonalStack] | None = {} if cache else None

    def __len__(self) -> int:
        return len(self.rows)

    def __getitem__(self, index: int) -> SeasonalStack:
        if self._cache is None:
            return load_stack(self.root, self.rows[index])
        if index not in self._cache:
            self._cache[index] = load_stack(self.root, self.rows[index])
        return self._cache[index]

    def subset(self, indices: Sequence[int]) -> 'SeasonalStackDataset':
        return SeasonalStackDataset(self.root, [self.rows[i] for i in indices], cache=self._cache is not None)


async def _acquire_with_retries(
    catalog: TileCatalog,
    loc: LocationSample,
    sched: DateSchedule,
    max_cloud: float,
    window_days: int,
    retries: int,
    backoff_s: float,
) -> SeasonalStack | None:
    """Run ``acquire_stack``, retrying transport errors with exponential backoff."""
    retrying = AsyncRetrying(
        stop=stop_after_attempt(retries + 1),
        wait=wait_exponential(multiplier=backoff_s) + wait_random(0.0, backoff_s / 10.0),
        retry=retry_if_exception_type(CatalogTransportError),
        before_sleep=before_sleep_log(logger, logging.WARNING),
        reraise=True,
    )
    try:
        return await retrying(acquire_stack, catalog, loc, sched, max_cloud, window_days)
    except CatalogTransportError as e:
        raise CatalogUnavailableError(f"Catalog unreachable after {retries + 1} attempts: {str(e)}") from e


async def build_dataset(
    catalog: TileCatalog,
    cities: Sequence[CityRecord],
    n_locations: int,
    strategy: Literal['gaussian', 'uniform'],
    out_dir: str | Path,
    *,
    seed: int = 0,
    today: dt.date | None = None,
    sigma_km: float = 50.0,
    max_cloud: float = 0.10,
    window_days: int = 15,
    jitter_days: int = 365,
    land_boxes: Sequence[tuple[float, float, float, float]] = (),
    concurrency: int = 4,
    max_attempts: int = 1000,
    retries: int = 3,
    retry_backoff_s: float = 0.5,
) -> dict[str, Any]:
    """Collect ``n_locations`` accepted stacks into ``out_dir``.

    Location slot ``i`` draws its candidates from ``(seed, i, attempt)`` so the
    result does not depend on concurrency. Completed slots are skipped on restart.

    Returns:
        Summary with ``accepted``, ``rejected``, ``skipped`` counts and the manifest rows

    Raises:
        CatalogUnavailableError: transport errors outlived the retries; the manifest
            of the locations completed so far is written before raising
        RuntimeError: a slot exhausted ``max_attempts`` candidates
    """
    if n_locations <= 0:
        raise ValueError(f"n_locations must be positive, got {n_locations}")
    if strategy == 'gaussian' and not cities:
        raise ValueError("the gaussian strategy needs a non-empty city list")
    if strategy == 'uniform' and not land_boxes:
        raise ValueError("the uniform strategy needs land boxes")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    for stale in root.glob('.tmp_loc*'):
        shutil.rmtree(stale)
    today = today or dt.date.today()

    todo = [i for i in range(n_locations) if not _is_complete(root, i)]
    stats = {'accepted': 0, 'rejected': 0, 'skipped': n_locations - len(todo)}
    semaphore = asyncio.Semaphore(concurrency)
    writer_lock = asyncio.Lock()
    progress = tqdm(total=len(todo), desc='locations', disable=None)

    async def fill_slot(index: int) -> None:
        async with semaphore:
            for attempt in range(max_attempts):
                slot_rng = np.random.default_rng([seed, index, attempt])
                if strategy == 'gaussian':
                    loc = sample_location(cities, sigma_km, slot_rng)
                else:
                    loc = sample_uniform_location(land_boxes, slot_rng)
                sched = build_date_schedule(slot_rng, today, jitter_days, window_days)
                stack = await _acquire_with_retries(
                    catalog, loc, sched, max_cloud, window_days, retries, retry_backoff_s
                )
                if stack is None:
                    async with writer_lock:
                        stats['rejected'] += 1
                    continue
                meta = stack_meta(stack, sched, strategy, attempt + 1)
                async with writer_lock:
                    write_stack(root, index, stack, meta)
                    row = dict(meta, path=location_dir_name(index))
                    with (root / MANIFEST).open('a', encoding='utf-8') as f:
                        f.write(json.dumps(row, sort_keys=True) + '\n')
                    stats['accepted'] += 1
                    progress.update(1)
                return
            raise RuntimeError(f"location slot {index} found no valid stack in {max_attempts} attempts")

    started = time.monotonic()
    try:
        async with asyncio.TaskGroup() as group:
            for i in todo:
                group.create_task(fill_slot(i))
    except ExceptionGroup as eg:
        raise eg.exceptions[0] from eg
    finally:
        progress.close()
        rows = rewrite_manifest(root)
    logger.info(
        "Dataset %s: %d accepted, %d rejected, %d skipped in %.1fs",
        root,
        stats['accepted'],
        stats['rejected'],
        stats['skipped'],
        time.monotonic() - started,
    )
    return dict(stats, rows=rows, root=str(root))
