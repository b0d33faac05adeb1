"""Procedural synthetic world standing in for a satellite tile archive.

Land cover is a static field in world coordinates (so overlapping patches agree),
modulated by a hemisphere-aware seasonal cycle and a small date-keyed texture.
Everything is a pure function of (location, date, seed).
"""

import datetime as dt
import math
from collections.abc import Sequence

import numpy as np
from PIL import Image, ImageDraw

from .models import CatalogQuery, TilePatch

KM_PER_DEG = 111.32
N_CLASSES = 8

# Base colours (RGB, 0-255) and seasonal colour shifts per latent class.
CLASS_NAMES = (
    'water',
    'forest',
    'cropland',
    'grassland',
    'urban',
    'bare',
    'wetland',
    'snow_rock',
)
BASE_COLORS = np.array(
    [
        [38, 70, 120],
        [40, 92, 48],
        [150, 140, 70],
        [112, 150, 80],
        [140, 128, 128],
        [190, 170, 130],
        [70, 100, 90],
        [205, 205, 210],
    ],
    dtype=np.float64,
)
SEASONAL_SHIFT = np.array(
    [
        [4, 6, 2],
        [-18, 34, -12],
        [-52, 48, -30],
        [-30, 42, -20],
        [2, 2, 2],
        [6, 4, 0],
        [-20, 26, -8],
        [-30, -30, -30],
    ],
    dtype=np.float64,
)

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _mix(x: np.ndarray) -> np.ndarray:
    """splitmix64 finaliser on uint64 arrays."""
    with np.errstate(over='ignore'):
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return (x ^ (x >> np.uint64(31))) & _MASK64


def hash_uniform(*keys: np.ndarray | int) -> np.ndarray:
    """Deterministic uniform [0, 1) values keyed by integer arrays."""
    arrays = [np.asarray(k).astype(np.int64).astype(np.uint64) for k in keys]
    h = np.zeros(np.broadcast(*arrays).shape, dtype=np.uint64)
    with np.errstate(over='ignore'):
        for a in arrays:
            h = _mix(h + a * np.uint64(0x9E3779B97F4A7C15) + np.uint64(0x632BE59BD9B4E019))
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _smoothstep(t: np.ndarray) -> np.ndarray:
    return t * t * (3.0 - 2.0 * t)


def value_noise(x: np.ndarray, y: np.ndarray, *keys: np.ndarray | int) -> np.ndarray:
    """Bilinearly interpolated lattice noise in [0, 1) at lattice coordinates (x, y)."""
    x0 = np.floor(x)
    y0 = np.floor(y)
    tx = _smoothstep(x - x0)
    ty = _smoothstep(y - y0)
    ix = x0.astype(np.int64)
    iy = y0.astype(np.int64)
    v00 = hash_uniform(ix, iy, *keys)
    v10 = hash_uniform(ix + 1, iy, *keys)
    v01 = hash_uniform(ix, iy + 1, *keys)
    v11 = hash_uniform(ix + 1, iy + 1, *keys)
    top = v00 + (v10 - v00) * tx
    bottom = v01 + (v11 - v01) * tx
    return top + (bottom - top) * ty


def seasonal_term(lat: float, date: dt.date) -> float:
    """Signed seasonal phase in [-1, 1]; the phase is inverted south of the equator."""
    day_of_year = date.timetuple().tm_yday
    phase = math.sin(2.0 * math.pi * day_of_year / 365.0)
    return phase if lat >= 0.0 else -phase


def latent_histogram(class_map: np.ndarray, n_classes: int = N_CLASSES) -> list[int]:
    """Pixel counts per latent class."""
    return [int(c) for c in np.bincount(class_map.ravel(), minlength=n_classes)[:n_classes]]


def round_coord(value: float) -> float:
    return round(value, 4)


class SyntheticWorld:
    """Deterministic world rendering patches for catalog queries.

    With ``anchors`` set, land-cover diversity fades with distance from the nearest
    anchor: far away, most pixels collapse onto a single background class.
    """

    def __init__(
        self,
        seed: int = 0,
        patch_size: int = 64,
        ground_extent_km: float = 2.65,
        anchors: Sequence[tuple[float, float]] | None = None,
        anchor_scale_km: float = 100.0,
        feature_km: float = 0.9,
    ):
        self.seed = int(seed)
        self.patch_size = int(patch_size)
        self.ground_extent_km = float(ground_extent_km)
        self.anchors = np.asarray(anchors, dtype=np.float64) if anchors else None
        self.anchor_scale_km = float(anchor_scale_km)
        self.feature_km = float(feature_km)

    def _pixel_grid_km(self, lat: float, lon: float) -> tuple[np.ndarray, np.ndarray]:
        n = self.patch_size
        step = self.ground_extent_km / n
        offsets = (np.arange(n, dtype=np.float64) - (n - 1) / 2.0) * step
        cos_lat = max(math.cos(math.radians(lat)), 1e-6)
        x0 = lon * KM_PER_DEG * cos_lat
        y0 = lat * KM_PER_DEG
        xs = x0 + offsets[None, :]
        ys = y0 - offsets[:, None]
        return np.broadcast_to(xs, (n, n)), np.broadcast_to(ys, (n, n))

    def anchor_distance_km(self, lat: float, lon: float) -> float:
        """Great-circle distance to the nearest anchor (inf without anchors)."""
        if self.anchors is None or len(self.anchors) == 0:
            return math.inf
        lat1 = math.radians(lat)
        lat2 = np.radians(self.anchors[:, 0])
        dlat = lat2 - lat1
        dlon = np.radians(self.anchors[:, 1] - lon)
        a = np.sin(dlat / 2) ** 2 + math.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2) ** 2
        return float(np.min(2 * 6371.0 * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))))

    def class_map(self, lat: float, lon: float) -> np.ndarray:
        """Static latent land-cover class of every pixel of the patch centred at (lat, lon)."""
        xs, ys = self._pixel_grid_km(round_coord(lat), round_coord(lon))
        fields = np.empty((N_CLASSES,) + xs.shape, dtype=np.float64)
        for c in range(N_CLASSES):
            coarse = value_noise(xs / (2.0 * self.feature_km), ys / (2.0 * self.feature_km), self.seed, c, 1)
            fine = value_noise(xs / self.feature_km, ys / self.feature_km, self.seed, c, 2)
            fields[c] = 0.65 * coarse + 0.35 * fine
        # Regional preference so that patches differ in class composition.
        regional = value_noise(
            xs[:1, :1] / 40.0, ys[:1, :1] / 40.0, self.seed, np.arange(N_CLASSES)[:, None, None], 3
        )
        fields += 0.35 * regional
        if self.anchors is not None:
            d = self.anchor_distance_km(lat, lon)
            fields[0] += 1.5 * (1.0 - math.exp(-((d / self.anchor_scale_km) ** 2)))
        return np.argmax(fields, axis=0).astype(np.int64)

    def cloud_fraction(self, lat: float, lon: float, date: dt.date) -> float:
        """70% of (location, date) keys are cloud free, the rest uniform in [0, 1]."""
        key_lat = int(round(round_coord(lat) * 1e4))
        key_lon = int(round(round_coord(lon) * 1e4))
        u = hash_uniform(key_lat, key_lon, date.toordinal(), self.seed, 17)
        if float(u) < 0.7:
            return 0.0
        v = hash_uniform(key_lat, key_lon, date.toordinal(), self.seed, 23)
        return float(v)

    def render(self, lat: float, lon: float, date: dt.date, cloud: float | None = None) -> TilePatch:
        """Render the patch centred at (lat, lon) on ``date``."""
        lat = round_coord(lat)
        lon = round_coord(lon)
        classes = self.class_map(lat, lon)
        season = seasonal_term(lat, date)
        xs, ys = self._pixel_grid_km(lat, lon)
        step = self.ground_extent_km / self.patch_size
        px = np.round(xs / step).astype(np.int64)
        py = np.round(ys / step).astype(np.int64)

        image = BASE_COLORS[classes] + season * SEASONAL_SHIFT[classes]
        texture = hash_uniform(px, py, date.toordinal(), self.seed, 5) - 0.5
        static_texture = hash_uniform(px, py, self.seed, 7) - 0.5
        image += 10.0 * texture[..., None] + 14.0 * static_texture[..., None]

        cloud_fraction = self.cloud_fraction(lat, lon, date) if cloud is None else float(cloud)
        if cloud_fraction > 0.0:
            haze = value_noise(xs / 0.8, ys / 0.8, self.seed, date.toordinal(), 11)
            alpha = np.clip(cloud_fraction * (0.5 + haze), 0.0, 1.0)[..., None]
            image = image * (1.0 - alpha) + 235.0 * alpha

        pixels = np.clip(np.round(image), 0, 255).astype(np.uint8)
        return TilePatch(
            pixels=pixels,
            lat=lat,
            lon=lon,
            date=date,
            cloud_fraction=cloud_fraction,
            ground_extent_km=self.ground_extent_km,
            latent_classes=classes,
        )


def synth_tile(
    query: CatalogQuery,
    world_seed: int,
    patch_size: int = 64,
    anchors: Sequence[tuple[float, float]] | None = None,
) -> TilePatch:
    """Render the synthetic patch for a query, dated at the centre of its window."""
    world = SyntheticWorld(seed=world_seed, patch_size=patch_size, anchors=anchors)
    return world.render(query.lat, query.lon, query.center_date)


def insert_change(
    pixels: np.ndarray, rng: np.random.Generator, min_frac: float = 0.05, max_frac: float = 0.2
) -> tuple[np.ndarray, np.ndarray]:
    """Paint a random convex polygon of new construction onto ``pixels``.

    Returns:
        The changed image and the binary change mask.
    """
    n = pixels.shape[0]
    target = rng.uniform(min_frac, max_frac) * n * n
    radius = math.sqrt(target / math.pi)
    cx, cy = rng.uniform(radius, n - radius, size=2)
    angles = np.sort(rng.uniform(0.0, 2.0 * math.pi, size=int(rng.integers(5, 9))))
    radii = radius * rng.uniform(0.8, 1.25, size=angles.size)
    vertices = [
        (float(cx + r * math.cos(a)), float(cy + r * math.sin(a))) for a, r in zip(angles, radii)
    ]
    canvas = Image.new('L', (n, n), 0)
    ImageDraw.Draw(canvas).polygon(vertices, fill=1)
    mask = np.asarray(canvas, dtype=np.uint8)
    if mask.sum() == 0:
        mask = mask.copy()
        mask[int(cy), int(cx)] = 1

    roof = np.array([180.0, 80.0, 60.0]) + rng.uniform(-20.0, 20.0, size=3)
    texture = rng.uniform(-12.0, 12.0, size=(n, n, 1))
    changed = pixels.astype(np.float64)
    changed = np.where(mask[..., None] == 1, roof + texture, changed)
    return np.clip(np.round(changed), 0, 255).astype(np.uint8), mask
