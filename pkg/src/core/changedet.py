"""Change detection from encoder feature differences with a U-Net style decoder."""

import datetime as dt
import logging
from collections.abc import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from .config import ChangeConfig
from .metrics import metrics_from_counts
from .models import ChangePair, MaskMetrics
from .networks import Encoder, norm_groups
from .synth import SyntheticWorld, insert_change
from .views import to_tensor

logger = logging.getLogger(__name__)


def stage_differences(encoder: Encoder, image_a: torch.Tensor, image_b: torch.Tensor) -> list[torch.Tensor]:
    """|f_s(a) - f_s(b)| for the stem and every downsampling stage, finest first."""
    if image_a.shape != image_b.shape:
        raise ValueError(f"image shapes differ: {tuple(image_a.shape)} vs {tuple(image_b.shape)}")
    with torch.no_grad():
        maps_a = encoder.forward_stages(image_a, include_stem=True)
        maps_b = encoder.forward_stages(image_b, include_stem=True)
    return [(fa - fb).abs() for fa, fb in zip(maps_a, maps_b)]


def change_features(encoder: Encoder, pair: ChangePair) -> list[torch.Tensor]:
    """Per-stage absolute feature differences of one pair (C_s x H_s x W_s each)."""
    encoder.eval()
    a = to_tensor(pair.image_a).unsqueeze(0)
    b = to_tensor(pair.image_b).unsqueeze(0)
    return [d[0] for d in stage_differences(encoder, a, b)]


def _conv_block(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False),
        nn.GroupNorm(norm_groups(out_channels), out_channels),
        nn.ReLU(),
        nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False),
        nn.GroupNorm(norm_groups(out_channels), out_channels),
        nn.ReLU(),
    )


class ChangeDecoder(nn.Module):
    """U-Net decoder over multi-scale difference maps.

    ``skip_channels`` lists the channels of the difference maps finest first;
    the coarsest map is the bottleneck and every finer one joins through a skip
    connection after an upsampling layer (followed by dropout).
    """

    def __init__(self, skip_channels: Sequence[int], dropout: float = 0.3):
        super().__init__()
        skip_channels = [int(c) for c in skip_channels]
        if len(skip_channels) < 2:
            raise ValueError("the decoder needs at least two scales")
        self.skip_channels = skip_channels
        self.bottleneck = _conv_block(skip_channels[-1], skip_channels[-1])
        ups, drops, fuses = [], [], []
        in_channels = skip_channels[-1]
        for channels in reversed(skip_channels[:-1]):
            ups.append(nn.ConvTranspose2d(in_channels, channels, 2, stride=2))
            drops.append(nn.Dropout(dropout))
            fuses.append(_conv_block(2 * channels, channels))
            in_channels = channels
        self.ups = nn.ModuleList(ups)
        self.drops = nn.ModuleList(drops)
        self.fuses = nn.ModuleList(fuses)
        self.head = nn.Conv2d(skip_channels[0], 1, 1)

    @classmethod
    def for_encoder(cls, encoder: Encoder, dropout: float = 0.3) -> 'ChangeDecoder':
        return cls([encoder.widths[0], *encoder.widths], dropout=dropout)

    def forward(self, diffs: Sequence[torch.Tensor]) -> torch.Tensor:
        """Per-pixel change logits (B x H x W) at the resolution of ``diffs[0]``."""
        x = self.bottleneck(diffs[-1])
        for up, drop, fuse, skip in zip(self.ups, self.drops, self.fuses, reversed(diffs[:-1])):
            x = drop(up(x))
            x = fuse(torch.cat([x, skip], dim=1))
        return self.head(x).squeeze(1)


def _tile_size(side: int, config: ChangeConfig, encoder: Encoder) -> int:
    """Largest multiple of the encoder's downsampling factor within ``min(patch_size, side)``."""
    factor = 2 ** len(encoder.widths)
    size = min(config.patch_size, side) // factor * factor
    if size == 0:
        raise ValueError(
            f"images of side {side} are smaller than the {factor}px tile a {len(encoder.widths)}-stage encoder needs"
        )
    return size


def tile_pairs(
    pairs: Sequence[ChangePair], size: int
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Non-overlapping size x size tiles; partial tiles at the borders are dropped."""
    tiles_a, tiles_b, tiles_m = [], [], []
    for pair in pairs:
        a, b = to_tensor(pair.image_a), to_tensor(pair.image_b)
        mask = torch.from_numpy(np.ascontiguousarray(pair.gt_mask)).float()
        h, w = mask.shape
        for top in range(0, h - size + 1, size):
            for left in range(0, w - size + 1, size):
                tiles_a.append(a[:, top : top + size, left : left + size])
                tiles_b.append(b[:, top : top + size, left : left + size])
                tiles_m.append(mask[top : top + size, left : left + size])
    if not tiles_a:
        raise ValueError(f"no {size}x{size} tile fits into the given pairs")
    return torch.stack(tiles_a), torch.stack(tiles_b), torch.stack(tiles_m)


def _augment(
    a: torch.Tensor, b: torch.Tensor, m: torch.Tensor, rng: np.random.Generator
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """The same random horizontal flip and 90 degree rotation for a, b and the mask."""
    out_a, out_b, out_m = [], [], []
    for i in range(a.shape[0]):
        k = int(rng.integers(4))
        flip = bool(rng.random() < 0.5)
        ta, tb, tm = a[i], b[i], m[i]
        if flip:
            ta, tb, tm = ta.flip(-1), tb.flip(-1), tm.flip(-1)
        out_a.append(torch.rot90(ta, k, dims=(-2, -1)))
        out_b.append(torch.rot90(tb, k, dims=(-2, -1)))
        out_m.append(torch.rot90(tm, k, dims=(-2, -1)))
    return torch.stack(out_a), torch.stack(out_b), torch.stack(out_m)


@torch.no_grad()
def predict_masks(
    encoder: Encoder, decoder: ChangeDecoder, a: torch.Tensor, b: torch.Tensor, batch_size: int = 32
) -> torch.Tensor:
    """Binary change masks for batches of tiles (logit > 0)."""
    encoder.eval()
    decoder.eval()
    preds = [
        decoder(stage_differences(encoder, a[i : i + batch_size], b[i : i + batch_size])) > 0
        for i in range(0, a.shape[0], batch_size)
    ]
    return torch.cat(preds)


def evaluate_change(
    encoder: Encoder, decoder: ChangeDecoder, pairs: Sequence[ChangePair], config: ChangeConfig
) -> MaskMetrics:
    """Change-class precision/recall/F1 accumulated over every tile of every pair."""
    side = min(min(p.gt_mask.shape) for p in pairs)
    a, b, m = tile_pairs(pairs, _tile_size(side, config, encoder))
    pred = predict_masks(encoder, decoder, a, b, config.batch_size).bool()
    gt = m.bool()
    tp = int((pred & gt).sum())
    fp = int((pred & ~gt).sum())
    fn = int((~pred & gt).sum())
    return metrics_from_counts(tp, fp, fn)


def predict_pair(
    encoder: Encoder, decoder: ChangeDecoder, pair: ChangePair, config: ChangeConfig
) -> np.ndarray:
    """Full-image predicted mask; pixels outside the tiled area stay 0."""
    h, w = pair.gt_mask.shape
    size = _tile_size(min(h, w), config, encoder)
    pred = predict_masks(encoder, decoder, *tile_pairs([pair], size)[:2], config.batch_size)
    out = np.zeros((h, w), dtype=np.uint8)
    i = 0
    for top in range(0, h - size + 1, size):
        for left in range(0, w - size + 1, size):
            out[top : top + size, left : left + size] = pred[i].numpy().astype(np.uint8)
            i += 1
    return out


def train_change_decoder(
    encoder: Encoder,
    pairs: Sequence[ChangePair],
    config: ChangeConfig,
    progress: bool = False,
) -> tuple[ChangeDecoder, MaskMetrics]:
    """Train a decoder on the frozen encoder's difference maps.

    Adam with weight decay, exponential learning-rate decay once per epoch, and
    (with ``config.augment``) random flips and 90 degree rotations of the tiles.

    Returns:
        The trained decoder and its training-set metrics.

    Raises:
        ValueError: no pairs, or no changed pixel in any ground-truth mask
    """
    if not pairs:
        raise ValueError("change detection needs at least one training pair")
    if not any(p.gt_mask.any() for p in pairs):
        raise ValueError("every ground-truth mask is empty; nothing to learn about the change class")
    encoder.eval()

    side = min(min(p.gt_mask.shape) for p in pairs)
    a, b, m = tile_pairs(pairs, _tile_size(side, config, encoder))
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    decoder = ChangeDecoder.for_encoder(encoder, dropout=config.dropout)
    optimizer = torch.optim.Adam(decoder.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.ExponentialLR(optimizer, gamma=config.lr_gamma)

    for epoch in tqdm(range(config.epochs), desc="change decoder", disable=not progress, leave=False):
        decoder.train()
        order = rng.permutation(a.shape[0])
        epoch_loss = 0.0
        for i in range(0, len(order), config.batch_size):
            idx = torch.from_numpy(order[i : i + config.batch_size])
            ba, bb, bm = a[idx], b[idx], m[idx]
            if config.augment:
                ba, bb, bm = _augment(ba, bb, bm, rng)
            logits = decoder(stage_differences(encoder, ba, bb))
            loss = F.binary_cross_entropy_with_logits(logits, bm)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss) * len(idx)
        scheduler.step()
        logger.debug("change epoch %d: loss %.4f", epoch, epoch_loss / len(order))

    return decoder, evaluate_change(encoder, decoder, pairs, config)


def make_change_pairs(
    world: SyntheticWorld,
    n: int,
    seed: int = 0,
    min_frac: float = 0.05,
    max_frac: float = 0.2,
) -> list[ChangePair]:
    """Cloud-free image pairs one year apart with a painted construction polygon in the second."""
    pairs = []
    first_day = dt.date(2018, 1, 1).toordinal()
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        if world.anchors is not None and len(world.anchors):
            lat, lon = world.anchors[int(rng.integers(len(world.anchors)))]
            lat = float(np.clip(lat + rng.normal(0.0, 0.3), -85.0, 85.0))
            lon = float((lon + rng.normal(0.0, 0.3) + 180.0) % 360.0 - 180.0)
        else:
            lat, lon = float(rng.uniform(-60.0, 60.0)), float(rng.uniform(-180.0, 180.0))
        date_a = dt.date.fromordinal(first_day + int(rng.integers(365)))
        date_b = date_a + dt.timedelta(days=365 + int(rng.integers(-15, 16)))
        before = world.render(lat, lon, date_a, cloud=0.0)
        after = world.render(lat, lon, date_b, cloud=0.0)
        changed, mask = insert_change(after.pixels, rng, min_frac, max_frac)
        pairs.append(ChangePair(image_a=before.pixels, image_b=changed, gt_mask=mask))
    return pairs
