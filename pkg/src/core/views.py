"""Query/key view generation from seasonal stacks."""

import math

import numpy as np
import torch
import torchvision.transforms.functional as TF
from torchvision.transforms import InterpolationMode

from .config import ViewsConfig
from .models import AugmentationParams, PairViews, SeasonalStack, ViewSet


def to_tensor(pixels: np.ndarray) -> torch.Tensor:
    """HxWx3 uint8 array -> 3xHxW float32 tensor in [0, 1]."""
    return torch.from_numpy(np.ascontiguousarray(pixels)).permute(2, 0, 1).float().div(255.0)


def resize(image: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear resize to size x size; a no-op copy when the size already matches."""
    if image.shape[-2:] == (size, size):
        return image.clone()
    return TF.resize(image, [size, size], interpolation=InterpolationMode.BILINEAR, antialias=True)


def blur_kernel_size(out_size: int) -> int:
    """Odd kernel about a tenth of the image side (MoCo-v2 uses 23 px at 224)."""
    return max(3, int(0.1 * out_size) // 2 * 2 + 1)


def select_temporal_views(stack: SeasonalStack, rng: np.random.Generator) -> tuple[int, int, int]:
    """Three distinct dates, uniform over ordered triples."""
    n = len(stack.patches)
    if n < 3:
        raise ValueError(f"a stack needs at least 3 patches for temporal views, got {n}")
    t0, t1, t2 = (int(t) for t in rng.choice(n, size=3, replace=False))
    return t0, t1, t2


def _draw_crop(rng: np.random.Generator, config: ViewsConfig) -> tuple[float, float, float, float]:
    """Random-resized-crop rectangle as fractions of the image side."""
    area = float(rng.uniform(*config.crop_scale))
    log_lo, log_hi = math.log(config.crop_ratio[0]), math.log(config.crop_ratio[1])
    for _ in range(10):
        ratio = math.exp(float(rng.uniform(log_lo, log_hi)))
        w = math.sqrt(area * ratio)
        h = math.sqrt(area / ratio)
        if w <= 1.0 and h <= 1.0:
            break
    else:
        # Square of the same area always fits.
        w = h = math.sqrt(area)
    x = float(rng.uniform(0.0, 1.0 - w)) if w < 1.0 else 0.0
    y = float(rng.uniform(0.0, 1.0 - h)) if h < 1.0 else 0.0
    return x, y, w, h


def draw_aug_params(rng: np.random.Generator, config: ViewsConfig) -> AugmentationParams:
    """Independent draw of crop, flip, colour jitter, grayscale and blur."""
    crop = _draw_crop(rng, config)
    hflip = bool(rng.random() < config.hflip_p)
    jitter = (1.0, 1.0, 1.0, 0.0)
    if rng.random() < config.jitter_p:
        jitter = (
            float(rng.uniform(1.0 - config.brightness, 1.0 + config.brightness)),
            float(rng.uniform(1.0 - config.contrast, 1.0 + config.contrast)),
            float(rng.uniform(1.0 - config.saturation, 1.0 + config.saturation)),
            float(rng.uniform(-config.hue, config.hue)),
        )
    grayscale = bool(rng.random() < config.grayscale_p)
    blur_sigma = float(rng.uniform(*config.blur_sigma)) if rng.random() < config.blur_p else 0.0
    return AugmentationParams(
        crop=crop,
        hflip=hflip,
        jitter=jitter,
        grayscale=grayscale,
        blur_sigma=blur_sigma,
        out_size=config.out_size,
    )


def apply_artificial(image: torch.Tensor, params: AugmentationParams) -> torch.Tensor:
    """Apply crop -> flip -> jitter -> grayscale -> blur, always in that order.

    Args:
        image: 3xSxS float tensor in [0, 1]
        params: a draw from draw_aug_params

    Returns:
        3 x out_size x out_size tensor
    """
    if image.ndim != 3 or image.shape[0] != 3 or image.shape[1] != image.shape[2]:
        raise ValueError(f"expected a square 3-channel image, got shape {tuple(image.shape)}")
    side = image.shape[-1]
    x, y, w, h = params.crop
    left = min(int(round(x * side)), side - 1)
    top = min(int(round(y * side)), side - 1)
    width = min(max(1, int(round(w * side))), side - left)
    height = min(max(1, int(round(h * side))), side - top)

    if (top, left, height, width) == (0, 0, side, side):
        out = resize(image, params.out_size)
    else:
        out = TF.resized_crop(
            image,
            top,
            left,
            height,
            width,
            [params.out_size, params.out_size],
            interpolation=InterpolationMode.BILINEAR,
            antialias=True,
        ).clamp(0.0, 1.0)
    if params.hflip:
        out = TF.hflip(out)
    brightness, contrast, saturation, hue = params.jitter
    if brightness != 1.0:
        out = TF.adjust_brightness(out, brightness)
    if contrast != 1.0:
        out = TF.adjust_contrast(out, contrast)
    if saturation != 1.0:
        out = TF.adjust_saturation(out, saturation)
    if hue != 0.0:
        out = TF.adjust_hue(out, hue)
    if params.grayscale:
        out = TF.rgb_to_grayscale(out, num_output_channels=3)
    if params.blur_sigma > 0.0:
        k = blur_kernel_size(params.out_size)
        out = TF.gaussian_blur(out, [k, k], [params.blur_sigma, params.blur_sigma])
    return out


def make_views(stack: SeasonalStack, rng: np.random.Generator, config: ViewsConfig) -> ViewSet:
    """Query plus seasonal+artificial, seasonal-only and artificial-only keys."""
    t0, t1, t2 = select_temporal_views(stack, rng)
    images = [to_tensor(p.pixels) for p in stack.patches]
    params_k0 = draw_aug_params(rng, config)
    params_k2 = draw_aug_params(rng, config)
    return ViewSet(
        x_q=resize(images[t0], config.out_size),
        x_k0=apply_artificial(images[t1], params_k0),
        x_k1=resize(images[t2], config.out_size),
        x_k2=apply_artificial(images[t0], params_k2),
        t_indices=(t0, t1, t2),
        params_k0=params_k0,
        params_k2=params_k2,
    )


def make_pair_views(
    stack: SeasonalStack, rng: np.random.Generator, config: ViewsConfig, temporal: bool
) -> PairViews:
    """Two artificially augmented views for the single sub-space baselines.

    With ``temporal`` the key comes from another date of the same location.
    """
    t0, t1, _ = select_temporal_views(stack, rng)
    source_k = t1 if temporal else t0
    images = [to_tensor(p.pixels) for p in stack.patches]
    return PairViews(
        x_q=apply_artificial(images[t0], draw_aug_params(rng, config)),
        x_k=apply_artificial(images[source_k], draw_aug_params(rng, config)),
        t_indices=(t0, source_k),
    )


def collate_views(views: list[ViewSet]) -> dict[str, torch.Tensor]:
    """Stack a list of ViewSets into batched tensors keyed by view name."""
    if not views:
        raise ValueError("cannot collate an empty batch")
    return {
        name: torch.stack([getattr(v, name) for v in views])
        for name in ('x_q', 'x_k0', 'x_k1', 'x_k2')
    }


def collate_pairs(views: list[PairViews]) -> dict[str, torch.Tensor]:
    if not views:
        raise ValueError("cannot collate an empty batch")
    return {
        'x_q': torch.stack([v.x_q for v in views]),
        'x_k': torch.stack([v.x_k for v in views]),
    }
