"""Tests for temporal view selection and the artificial augmentation family."""

import datetime as dt

import numpy as np
import pytest
import torch
import torchvision.transforms.functional as TF

from core.config import ViewsConfig
from core.models import AugmentationParams, DateSchedule, LocationSample, SeasonalStack, TilePatch
from core.views import (
    apply_artificial,
    blur_kernel_size,
    collate_views,
    draw_aug_params,
    make_pair_views,
    make_views,
    resize,
    select_temporal_views,
    to_tensor,
)

NO_JITTER = dict(jitter_p=0.0, grayscale_p=0.0, blur_p=0.0)


def _identical_stack(n_dates: int = 5, size: int = 16) -> SeasonalStack:
    pixels = np.random.default_rng(0).integers(0, 256, size=(size, size, 3), dtype=np.uint8)
    dates = tuple(dt.date(2021, 1, 1) + dt.timedelta(days=91 * k) for k in range(n_dates))
    patches = tuple(TilePatch(pixels=pixels, lat=1.0, lon=2.0, date=d, cloud_fraction=0.0) for d in dates)
    location = LocationSample(city_index=0, center_lat=1.0, center_lon=2.0, rng_seed=0)
    return SeasonalStack.model_construct(
        location=location, patches=patches, schedule=DateSchedule.model_construct(dates=dates, window_days=15)
    )


@pytest.fixture
def image() -> torch.Tensor:
    return torch.rand(3, 24, 24, generator=torch.Generator().manual_seed(0))


class TestSelectTemporalViews:
    """Test date selection."""

    def test_three_dates_is_a_permutation(self):
        triple = select_temporal_views(_identical_stack(3), np.random.default_rng(0))
        assert sorted(triple) == [0, 1, 2]

    def test_uniform_query_date(self, stack):
        rng = np.random.default_rng(1)
        t0 = np.array([select_temporal_views(stack, rng)[0] for _ in range(10_000)])
        freq = np.bincount(t0, minlength=5) / t0.size
        assert np.all(np.abs(freq - 0.2) <= 0.02)

    def test_deterministic(self, stack):
        assert select_temporal_views(stack, np.random.default_rng(9)) == select_temporal_views(
            stack, np.random.default_rng(9)
        )

    def test_too_few_dates(self):
        with pytest.raises(ValueError, match='at least 3'):
            select_temporal_views(_identical_stack(2), np.random.default_rng(0))


class TestDrawAugParams:
    """Test augmentation parameter draws."""

    def test_forced_identity(self):
        config = ViewsConfig(crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), hflip_p=0.0, **NO_JITTER)
        params = draw_aug_params(np.random.default_rng(0), config)
        assert params.is_identity

    def test_grayscale_frequency(self):
        rng = np.random.default_rng(2)
        config = ViewsConfig()
        hits = sum(draw_aug_params(rng, config).grayscale for _ in range(10_000))
        assert abs(hits - 2000) <= 120

    def test_bounds_over_many_draws(self):
        rng = np.random.default_rng(3)
        config = ViewsConfig()
        for _ in range(10_000):
            p = draw_aug_params(rng, config)
            x, y, w, h = p.crop
            assert 0.0 < w <= 1.0 and 0.0 < h <= 1.0
            assert x >= 0.0 and y >= 0.0 and x + w <= 1.0 + 1e-9 and y + h <= 1.0 + 1e-9
            assert 0.2 - 1e-9 <= w * h <= 1.0 + 1e-9
            assert -0.1 <= p.jitter[3] <= 0.1
            assert p.blur_sigma == 0.0 or 0.1 <= p.blur_sigma <= 2.0

    def test_out_of_range_params_rejected(self):
        with pytest.raises(ValueError):
            AugmentationParams(jitter=(1.0, 1.0, 1.0, 0.3))
        with pytest.raises(ValueError):
            AugmentationParams(crop=(0.5, 0.5, 0.8, 0.8))


class TestApplyArtificial:
    """Test the fixed-order transform pipeline."""

    def test_identity_equals_resize(self, image):
        out = apply_artificial(image, AugmentationParams(out_size=16))
        assert torch.equal(out, resize(image, 16))

    def test_hflip_is_an_involution(self, image):
        params = AugmentationParams(hflip=True, out_size=24)
        assert torch.equal(TF.hflip(apply_artificial(image, params)), resize(image, 24))

    def test_grayscale_channels_equal(self, image):
        out = apply_artificial(image, AugmentationParams(grayscale=True, out_size=16))
        assert torch.allclose(out[0], out[1]) and torch.allclose(out[1], out[2])

    def test_pure(self, image):
        params = draw_aug_params(np.random.default_rng(4), ViewsConfig(out_size=16))
        assert torch.equal(apply_artificial(image, params), apply_artificial(image, params))

    def test_output_shape_and_range(self, image):
        rng = np.random.default_rng(5)
        config = ViewsConfig(out_size=12)
        for _ in range(50):
            out = apply_artificial(image, draw_aug_params(rng, config))
            assert out.shape == (3, 12, 12)
            assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0

    def test_tiny_crop_clamps_to_one_pixel(self, image):
        params = AugmentationParams(crop=(0.5, 0.5, 0.001, 0.001), out_size=8)
        out = apply_artificial(image, params)
        assert out.shape == (3, 8, 8)

    def test_non_square_rejected(self):
        with pytest.raises(ValueError, match='square'):
            apply_artificial(torch.rand(3, 8, 10), AugmentationParams())

    def test_blur_kernel_is_odd(self):
        for size in (16, 32, 64, 224):
            k = blur_kernel_size(size)
            assert k % 2 == 1 and k >= 3
        assert blur_kernel_size(224) == 23


class TestMakeViews:
    """Test query/key view construction."""

    def test_provenance(self, stack):
        config = ViewsConfig(out_size=16)
        views = make_views(stack, np.random.default_rng(0), config)
        t0, t1, t2 = views.t_indices
        assert len({t0, t1, t2}) == 3
        assert torch.equal(views.x_q, resize(to_tensor(stack.patches[t0].pixels), 16))
        assert torch.equal(views.x_k1, resize(to_tensor(stack.patches[t2].pixels), 16))
        assert torch.equal(views.x_k0, apply_artificial(to_tensor(stack.patches[t1].pixels), views.params_k0))
        assert torch.equal(views.x_k2, apply_artificial(to_tensor(stack.patches[t0].pixels), views.params_k2))

    def test_identical_dates_and_identity_augs_collapse(self):
        config = ViewsConfig(out_size=16, crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), hflip_p=0.0, **NO_JITTER)
        views = make_views(_identical_stack(), np.random.default_rng(0), config)
        assert torch.equal(views.x_q, views.x_k0)
        assert torch.equal(views.x_q, views.x_k1)
        assert torch.equal(views.x_q, views.x_k2)

    def test_key2_differs_from_query_only_by_geometry(self, stack):
        config = ViewsConfig(out_size=32, **NO_JITTER)
        rng = np.random.default_rng(6)
        for _ in range(10):
            views = make_views(stack, rng, config)
            full = to_tensor(stack.patches[views.t_indices[0]].pixels)
            x, y, w, h = views.params_k2.crop
            left = min(int(round(x * 32)), 31)
            top = min(int(round(y * 32)), 31)
            width = min(max(1, int(round(w * 32))), 32 - left)
            height = min(max(1, int(round(h * 32))), 32 - top)
            expected = TF.resized_crop(full, top, left, height, width, [32, 32], antialias=True).clamp(0.0, 1.0)
            if views.params_k2.hflip:
                expected = TF.hflip(expected)
            assert torch.allclose(views.x_k2, expected, atol=1e-6)

    def test_crop_draws_uncorrelated(self, stack):
        rng = np.random.default_rng(7)
        config = ViewsConfig(out_size=8)
        k0, k2 = [], []
        for _ in range(2000):
            k0.append(draw_aug_params(rng, config).crop)
            k2.append(draw_aug_params(rng, config).crop)
        k0, k2 = np.array(k0), np.array(k2)
        for c in range(4):
            assert abs(np.corrcoef(k0[:, c], k2[:, c])[0, 1]) < 0.08

    def test_collate(self, stacks):
        rng = np.random.default_rng(0)
        batch = collate_views([make_views(s, rng, ViewsConfig(out_size=16)) for s in stacks[:3]])
        assert set(batch) == {'x_q', 'x_k0', 'x_k1', 'x_k2'}
        assert batch['x_q'].shape == (3, 3, 16, 16)

    def test_collate_empty(self):
        with pytest.raises(ValueError):
            collate_views([])


class TestPairViews:
    """Test the single sub-space baseline views."""

    def test_moco_pairs_share_the_date(self, stack):
        pair = make_pair_views(stack, np.random.default_rng(0), ViewsConfig(out_size=16), temporal=False)
        assert pair.t_indices[0] == pair.t_indices[1]

    def test_temporal_pairs_use_two_dates(self, stack):
        pair = make_pair_views(stack, np.random.default_rng(0), ViewsConfig(out_size=16), temporal=True)
        assert pair.t_indices[0] != pair.t_indices[1]
        assert pair.x_q.shape == pair.x_k.shape == (3, 16, 16)
