"""Supervised evaluation of learned representations: linear probe, fine-tune, label sweeps."""

import copy
import datetime as dt
import logging
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image
from tqdm import tqdm

from .config import EvalConfig, ProbeConfig
from .geosampler import offset_to_degrees
from .learner import load_encoder, parameter_checksum
from .metrics import accuracy, mean_average_precision
from .models import ProbeResult
from .synth import N_CLASSES, SyntheticWorld, latent_histogram
from .views import to_tensor

logger = logging.getLogger(__name__)

Schema = Literal['multilabel', 'multiclass']
LABELS_FILE = 'labels.csv'


class LabeledDataset:
    """In-memory images with multi-label (N x C binary) or class-index (N,) targets."""

    def __init__(
        self,
        images: np.ndarray,
        targets: np.ndarray,
        schema: Schema,
        num_classes: int,
        split: str = 'train',
        allow_empty_rows: bool = False,
    ):
        images = np.asarray(images)
        targets = np.asarray(targets)
        if images.ndim != 4 or images.shape[-1] != 3:
            raise ValueError(f"images must be N x H x W x 3, got {images.shape}")
        if len(images) != len(targets):
            raise ValueError(f"{len(images)} images but {len(targets)} targets")
        if schema == 'multilabel':
            if targets.ndim != 2 or targets.shape[1] != num_classes:
                raise ValueError(f"multi-label targets must be N x {num_classes}, got {targets.shape}")
            if not allow_empty_rows and len(targets) and not targets.any(axis=1).all():
                raise ValueError("multi-label dataset has rows without any label")
        elif schema == 'multiclass':
            if targets.ndim != 1 or (len(targets) and not 0 <= targets.min() <= targets.max() < num_classes):
                raise ValueError(f"class-index targets must be a vector in [0, {num_classes})")
        else:
            raise ValueError(f"unknown target schema '{schema}'")
        self.images = images
        self.targets = targets
        self.schema: Schema = schema
        self.num_classes = int(num_classes)
        self.split = split
        self.allow_empty_rows = allow_empty_rows

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, index: int) -> tuple[torch.Tensor, np.ndarray]:
        return to_tensor(self.images[index]), self.targets[index]

    def image_tensor(self) -> torch.Tensor:
        return torch.stack([to_tensor(img) for img in self.images]) if len(self) else torch.empty(0, 3, 1, 1)

    def target_tensor(self) -> torch.Tensor:
        if self.schema == 'multilabel':
            return torch.as_tensor(self.targets, dtype=torch.float32)
        return torch.as_tensor(self.targets, dtype=torch.long)

    def class_frequencies(self) -> np.ndarray:
        """Fraction of samples carrying each class."""
        if self.schema == 'multilabel':
            return self.targets.astype(bool).mean(axis=0)
        return np.bincount(self.targets, minlength=self.num_classes) / max(len(self), 1)

    def _strata(self) -> np.ndarray:
        if self.schema == 'multiclass':
            return self.targets.astype(np.int64)
        # Each row is assigned to its rarest present label; empty rows form their own stratum.
        counts = self.targets.astype(bool).sum(axis=0)
        strata = np.full(len(self), -1, dtype=np.int64)
        for i, row in enumerate(self.targets.astype(bool)):
            present = np.flatnonzero(row)
            if present.size:
                strata[i] = present[np.argmin(counts[present])]
        return strata

    def subsample(self, fraction: float, seed: int = 0) -> 'LabeledDataset':
        """Stratified, seed-deterministic subset of ``round(fraction * N)`` samples.

        ``fraction == 1`` returns the dataset itself.
        """
        if not 0.0 < fraction <= 1.0:
            raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
        if fraction == 1.0:
            return self
        n_target = max(1, int(round(fraction * len(self))))
        strata = self._strata()
        labels, counts = np.unique(strata, return_counts=True)
        # Largest-remainder allocation so the strata sum to exactly n_target.
        quotas = counts * n_target / len(self)
        alloc = np.floor(quotas).astype(np.int64)
        remainder = n_target - int(alloc.sum())
        for j in np.argsort(-(quotas - alloc), kind='stable')[:remainder]:
            alloc[j] += 1
        rng = np.random.default_rng([seed, n_target])
        chosen = []
        for label, take in zip(labels, alloc):
            members = np.flatnonzero(strata == label)
            chosen.extend(rng.permutation(members)[:take].tolist())
        chosen = np.sort(np.asarray(chosen, dtype=np.int64))
        return LabeledDataset(
            self.images[chosen],
            self.targets[chosen],
            self.schema,
            self.num_classes,
            split=self.split,
            allow_empty_rows=self.allow_empty_rows,
        )


class FolderDataset(LabeledDataset):
    """Folder of images plus ``labels.csv`` with columns ``filename,labels``.

    ``labels`` holds space-separated class indices (multi-label) or a single
    index (multi-class). Images are converted to RGB and resized to ``size``.
    """

    def __init__(
        self,
        root: str | Path,
        schema: Schema,
        num_classes: int | None = None,
        size: int = 64,
        split: str = 'train',
    ):
        root = Path(root)
        labels_path = root / LABELS_FILE
        if not labels_path.exists():
            raise FileNotFoundError(f"{labels_path} not found")
        table = pd.read_csv(labels_path, dtype={'filename': str, 'labels': str}, keep_default_na=False)
        missing = {'filename', 'labels'} - set(table.columns)
        if missing:
            raise ValueError(f"{labels_path} lacks columns: {', '.join(sorted(missing))}")
        parsed = [[int(t) for t in str(cell).split()] for cell in table['labels']]
        if num_classes is None:
            num_classes = max((max(p) for p in parsed if p), default=-1) + 1
        images = []
        for name in table['filename']:
            with Image.open(root / name) as img:
                images.append(np.asarray(img.convert('RGB').resize((size, size), Image.Resampling.BILINEAR)))
        if schema == 'multilabel':
            targets = np.zeros((len(parsed), num_classes), dtype=np.int64)
            for i, classes in enumerate(parsed):
                targets[i, classes] = 1
        else:
            if any(len(p) != 1 for p in parsed):
                raise ValueError(f"{labels_path}: multi-class rows need exactly one label")
            targets = np.array([p[0] for p in parsed], dtype=np.int64)
        super().__init__(
            np.stack(images) if images else np.zeros((0, size, size, 3), dtype=np.uint8),
            targets,
            schema,
            num_classes,
            split=split,
            allow_empty_rows=True,
        )


def _downstream_location(world: SyntheticWorld, rng: np.random.Generator) -> tuple[float, float]:
    """Around the anchors when the world has them, otherwise anywhere between +-60 deg."""
    if world.anchors is not None and len(world.anchors):
        lat, lon = world.anchors[int(rng.integers(len(world.anchors)))]
        dlat, dlon = offset_to_degrees(float(lat), *rng.normal(0.0, 50.0, size=2))
        return float(np.clip(lat + dlat, -90.0, 90.0)), float((lon + dlon + 180.0) % 360.0 - 180.0)
    return float(rng.uniform(-60.0, 60.0)), float(rng.uniform(-180.0, 180.0))


def make_landcover_dataset(
    world: SyntheticWorld,
    n: int,
    schema: Schema = 'multilabel',
    seed: int = 0,
    presence_threshold: float = 0.05,
    split: str = 'train',
) -> LabeledDataset:
    """Synthetic land-cover classification from the latent class maps.

    Multi-label: a class is present when it covers at least ``presence_threshold``
    of the pixels. Multi-class: the dominant class.
    """
    rng = np.random.default_rng(seed)
    first_day = dt.date(2019, 1, 1).toordinal()
    images, targets = [], []
    for _ in range(n):
        lat, lon = _downstream_location(world, rng)
        date = dt.date.fromordinal(first_day + int(rng.integers(3 * 365)))
        patch = world.render(lat, lon, date, cloud=0.0)
        hist = np.asarray(latent_histogram(patch.latent_classes), dtype=np.float64)
        hist /= hist.sum()
        images.append(patch.pixels)
        if schema == 'multilabel':
            targets.append((hist >= presence_threshold).astype(np.int64))
        else:
            targets.append(int(np.argmax(hist)))
    return LabeledDataset(np.stack(images), np.asarray(targets), schema, N_CLASSES, split=split)


def make_landcover_datasets(
    world: SyntheticWorld,
    n_train: int,
    n_val: int,
    schema: Schema = 'multilabel',
    seed: int = 0,
    presence_threshold: float = 0.05,
) -> tuple[LabeledDataset, LabeledDataset]:
    """Disjointly seeded train and validation splits."""
    train = make_landcover_dataset(world, n_train, schema, seed * 2 + 0, presence_threshold, 'train')
    val = make_landcover_dataset(world, n_val, schema, seed * 2 + 1, presence_threshold, 'val')
    return train, val


@torch.no_grad()
def extract_features(encoder: nn.Module, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """General-embedding features of ``images`` in eval mode."""
    encoder.eval()
    chunks = [encoder(images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
    return torch.cat(chunks) if chunks else torch.empty(0)


def _metric(schema: Schema, logits: torch.Tensor, targets: torch.Tensor) -> tuple[str, float]:
    if schema == 'multilabel':
        return 'mAP', mean_average_precision(logits.numpy(), targets.numpy())
    return 'accuracy', accuracy(logits.numpy(), targets.numpy())


def _loss(schema: Schema, logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    if schema == 'multilabel':
        return F.binary_cross_entropy_with_logits(logits, targets)
    return F.cross_entropy(logits, targets)


def _resolve_encoder(encoder: nn.Module | str | Path) -> nn.Module:
    if isinstance(encoder, (str, Path)):
        return load_encoder(encoder)
    return encoder


def supervised_eval(
    encoder: nn.Module | str | Path,
    train: LabeledDataset,
    val: LabeledDataset,
    config: ProbeConfig,
    progress: bool = False,
) -> ProbeResult:
    """Train a linear classifier on encoder features and track the best validation metric.

    Linear mode freezes the encoder (features are computed once); fine-tune mode
    trains a copy of it, so the caller's encoder is never modified. The metric is
    evaluated before training (epoch 0) and after every epoch; ties go to the
    earlier epoch.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train and validation sets must be non-empty")
    if train.schema != val.schema or train.num_classes != val.num_classes:
        raise ValueError("train and validation sets declare different target schemas")
    schema = train.schema
    encoder = _resolve_encoder(encoder)
    finetune = config.mode == 'finetune'
    before = parameter_checksum(encoder)

    torch.manual_seed(config.seed)
    model_encoder = copy.deepcopy(encoder) if finetune else encoder
    if finetune:
        for p in model_encoder.parameters():
            p.requires_grad_(True)
    feature_dim = getattr(model_encoder, 'feature_dim', None)
    x_train, y_train = train.image_tensor(), train.target_tensor()
    x_val, y_val = val.image_tensor(), val.target_tensor()
    if not finetune:
        x_train = extract_features(model_encoder, x_train)
        x_val = extract_features(model_encoder, x_val)
        feature_dim = x_train.shape[1]
    if feature_dim is None:
        feature_dim = extract_features(model_encoder, x_train[:1]).shape[1]
    classifier = nn.Linear(int(feature_dim), train.num_classes)

    params = list(classifier.parameters()) + (list(model_encoder.parameters()) if finetune else [])
    optimizer = torch.optim.Adam(params, lr=config.effective_lr)
    scheduler = torch.optim.lr_scheduler.MultiStepLR(
        optimizer,
        milestones=[max(1, int(round(m * config.epochs))) for m in config.milestones],
        gamma=config.lr_decay,
    )
    generator = torch.Generator().manual_seed(config.seed)

    def forward(x: torch.Tensor) -> torch.Tensor:
        return classifier(model_encoder(x) if finetune else x)

    @torch.no_grad()
    def validate() -> tuple[str, float]:
        model_encoder.eval()
        logits = torch.cat(
            [forward(x_val[i : i + config.batch_size]) for i in range(0, len(x_val), config.batch_size)]
        )
        return _metric(schema, logits, y_val)

    name, value = validate()
    history = [value]
    for _ in tqdm(range(config.epochs), desc=f"{config.mode} probe", disable=not progress, leave=False):
        model_encoder.train(finetune)
        order = torch.randperm(len(x_train), generator=generator)
        for i in range(0, len(order), config.batch_size):
            idx = order[i : i + config.batch_size]
            loss = _loss(schema, forward(x_train[idx]), y_train[idx])
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
        scheduler.step()
        history.append(validate()[1])

    if not finetune and parameter_checksum(encoder) != before:
        raise RuntimeError("linear probing modified the frozen encoder")
    best = int(np.argmax(history))
    logger.debug("%s probe: best %s %.4f at epoch %d", config.mode, name, history[best], best)
    return ProbeResult(
        metric_name=name,
        metric_value=float(history[best]),
        epoch_of_best=best,
        history=[float(h) for h in history],
        extra={'mode': config.mode, 'n_train': len(train), 'n_val': len(val)},
    )


def linear_probe(
    encoder: nn.Module | str | Path, train: LabeledDataset, val: LabeledDataset, config: ProbeConfig
) -> ProbeResult:
    """Affine classifier on frozen features."""
    return supervised_eval(encoder, train, val, config.model_copy(update={'mode': 'linear'}))


def fine_tune(
    encoder: nn.Module | str | Path, train: LabeledDataset, val: LabeledDataset, config: ProbeConfig
) -> ProbeResult:
    """Encoder and classifier trained jointly (lr 1e-5 unless configured)."""
    return supervised_eval(encoder, train, val, config.model_copy(update={'mode': 'finetune'}))


def result_row(
    task: str, mode: str, fraction: float, seed: int, result: ProbeResult
) -> dict[str, object]:
    return {
        'task': task,
        'mode': mode,
        'fraction': float(fraction),
        'seed': int(seed),
        'metric_name': result.metric_name,
        'metric_value': result.metric_value,
        'epoch_of_best': result.epoch_of_best,
    }


def label_efficiency_sweep(
    encoder: nn.Module | str | Path,
    train: LabeledDataset,
    val: LabeledDataset,
    config: EvalConfig,
    mode: str | None = None,
    seeds: Sequence[int] | None = None,
) -> list[dict[str, object]]:
    """One probe per (fraction, seed) on stratified subsets of the training split."""
    encoder = _resolve_encoder(encoder)
    mode = mode or config.mode
    rows = []
    for fraction in config.fractions:
        for seed in seeds if seeds is not None else config.seeds:
            subset = train.subsample(fraction, seed=seed)
            result = supervised_eval(encoder, subset, val, config.probe_config(mode, seed))
            logger.info(
                "sweep %s fraction=%.3f seed=%d: %s=%.4f (n=%d)",
                mode,
                fraction,
                seed,
                result.metric_name,
                result.metric_value,
                len(subset),
            )
            rows.append(result_row('sweep', mode, fraction, seed, result))
    return rows


def run_seeds(fn: Callable[[int], float], seeds: Sequence[int] = (0, 1, 2)) -> tuple[float, list[float]]:
    """Median of ``fn(seed)`` over ``seeds``, with the individual values."""
    if not seeds:
        raise ValueError("run_seeds needs at least one seed")
    values = [float(fn(seed)) for seed in seeds]
    return float(np.median(values)), values

