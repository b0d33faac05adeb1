"""Subcommand implementations. Each returns a process exit code."""

import argparse
import asyncio
import logging
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import torch

from core.catalog_manager import CatalogManager
from core.changedet import evaluate_change, make_change_pairs, predict_pair, train_change_decoder
from core.config import RunConfig, paper_scale_config, write_config_echo
from core.evaluation import (
    FolderDataset,
    LabeledDataset,
    label_efficiency_sweep,
    make_landcover_datasets,
    result_row,
    supervised_eval,
)
from core.formatters import (
    format_change_metrics,
    format_paper_scale,
    format_result_rows,
    format_sample_summary,
    format_training_summary,
)
from core.geosampler import SeasonalStackDataset, build_dataset, load_cities
from core.learner import TRAIN_LOG_FIELDS, load_encoder, pretrain, random_encoder
from core.models import CityRecord
from core.networks import Encoder
from core.reporting import (
    plot_sweep,
    plot_training_log,
    read_results_csv,
    save_change_figure,
    write_results_csv,
)
from core.synth import SyntheticWorld

logger = logging.getLogger(__name__)


class Context:
    """Resolved config plus path handling relative to ``--workdir``."""

    def __init__(self, config: RunConfig, source: str | None, workdir: str | Path):
        self.config = config
        self.source = source
        self.workdir = Path(workdir)

    def path(self, value: str | Path) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.workdir / p

    @property
    def dataset_dir(self) -> Path:
        return self.path(self.config.io.dataset_dir)

    @property
    def runs_dir(self) -> Path:
        return self.path(self.config.io.runs_dir)

    @property
    def results_dir(self) -> Path:
        return self.path(self.config.io.results_dir)

    def echo(self, out_dir: Path) -> None:
        write_config_echo(self.config, self.source, out_dir)


def _cities(ctx: Context, required: bool) -> list[CityRecord]:
    sampler = ctx.config.sampler
    path = ctx.path(sampler.cities_path)
    if not required and not path.exists():
        return []
    return load_cities(path, sampler.top_n_cities)


def _anchors(ctx: Context) -> list[tuple[float, float]] | None:
    if not ctx.config.sampler.anchor_diversity:
        return None
    cities = _cities(ctx, required=False)
    return [(c.lat, c.lon) for c in cities] or None


def _world(ctx: Context, patch_size: int | None = None) -> SyntheticWorld:
    sampler = ctx.config.sampler
    return SyntheticWorld(
        seed=sampler.world_seed,
        patch_size=patch_size or sampler.patch_size,
        ground_extent_km=sampler.ground_extent_km * (patch_size or sampler.patch_size) / sampler.patch_size,
        anchors=_anchors(ctx),
    )


def cmd_sample(ctx: Context, args: argparse.Namespace) -> int:
    """Build the seasonal dataset and its manifest."""
    sampler = ctx.config.sampler
    cities = _cities(ctx, required=sampler.strategy == 'gaussian' or sampler.anchor_diversity)
    manager = CatalogManager(
        world_seed=sampler.world_seed,
        patch_size=sampler.patch_size,
        ground_extent_km=sampler.ground_extent_km,
        anchors=[(c.lat, c.lon) for c in cities] if sampler.anchor_diversity and cities else None,
    )
    catalog_dir = str(ctx.path(sampler.catalog_dir)) if sampler.catalog_dir else None
    catalog = manager.get_catalog(sampler.catalog, catalog_dir)

    out_dir = ctx.dataset_dir
    stats = asyncio.run(
        build_dataset(
            catalog,
            cities,
            sampler.n_locations,
            sampler.strategy,
            out_dir,
            seed=ctx.config.seed,
            today=sampler.today,
            sigma_km=sampler.sigma_km,
            max_cloud=sampler.max_cloud,
            window_days=sampler.window_days,
            jitter_days=sampler.jitter_days,
            land_boxes=sampler.land_boxes,
            concurrency=sampler.concurrency,
            max_attempts=sampler.max_attempts_per_location,
            retries=sampler.retries,
            retry_backoff_s=sampler.retry_backoff_s,
        )
    )
    ctx.echo(out_dir)
    print(format_sample_summary(stats))
    return 0


def cmd_pretrain(ctx: Context, args: argparse.Namespace) -> int:
    """Pre-train the encoder on the collected dataset."""
    if args.paper_scale:
        print(format_paper_scale(paper_scale_config()))
        return 0
    dataset = SeasonalStackDataset(ctx.dataset_dir)
    run_dir = ctx.runs_dir / 'pretrain'
    ctx.echo(run_dir)
    checkpoint = pretrain(
        dataset,
        ctx.config.learner,
        ctx.config.views,
        run_dir,
        resume=args.resume,
        run_config=ctx.config.model_dump(mode='json'),
    )
    log_path = run_dir / 'train_log.csv'
    rows: list[dict[str, Any]] = []
    if log_path.exists():
        rows = pd.read_csv(log_path, usecols=list(TRAIN_LOG_FIELDS)).to_dict('records')
        plot_training_log(log_path, run_dir / 'train_log.png')
    print(format_training_summary(str(checkpoint), rows))
    return 0


def _encoder(ctx: Context, args: argparse.Namespace) -> Encoder:
    if getattr(args, 'random_init', False):
        logger.info("Using a randomly initialised encoder")
        return random_encoder(ctx.config.learner, seed=ctx.config.seed)
    checkpoint = args.checkpoint or ctx.config.io.checkpoint
    path = ctx.path(checkpoint) if checkpoint else ctx.runs_dir / 'pretrain' / 'final.pt'
    logger.info("Loading encoder from %s", path)
    return load_encoder(path)


def _landcover(ctx: Context) -> tuple[LabeledDataset, LabeledDataset]:
    ev = ctx.config.eval
    if ev.dataset_dir:
        root = ctx.path(ev.dataset_dir)
        size = ctx.config.views.out_size
        train = FolderDataset(root / 'train', ev.schema_kind, size=size, split='train')
        val = FolderDataset(root / 'val', ev.schema_kind, num_classes=train.num_classes, size=size, split='val')
        return train, val
    return make_landcover_datasets(
        _world(ctx),
        ev.n_train,
        ev.n_val,
        ev.schema_kind,
        seed=ctx.config.seed,
        presence_threshold=ev.presence_threshold,
    )


def cmd_probe(ctx: Context, args: argparse.Namespace, mode: str) -> int:
    """Linear probe or fine-tune; one results row per seed."""
    encoder = _encoder(ctx, args)
    train, val = _landcover(ctx)
    seeds = list(ctx.config.eval.seeds) if args.all_seeds else [ctx.config.seed]
    task = 'probe' if mode == 'linear' else 'finetune'
    rows = []
    for seed in seeds:
        subset = train.subsample(args.fraction, seed=seed)
        result = supervised_eval(encoder, subset, val, ctx.config.eval.probe_config(mode, seed))
        rows.append(result_row(task, mode, args.fraction, seed, result))
    out_dir = ctx.results_dir / task
    write_results_csv(rows, out_dir / 'results.csv')
    ctx.echo(out_dir)
    print(format_result_rows(rows))
    return 0


def cmd_sweep(ctx: Context, args: argparse.Namespace) -> int:
    """Label-efficiency sweep over the configured fractions."""
    encoder = _encoder(ctx, args)
    train, val = _landcover(ctx)
    mode = args.mode or ctx.config.eval.mode
    rows = label_efficiency_sweep(encoder, train, val, ctx.config.eval, mode=mode)
    out_dir = ctx.results_dir / 'sweep'
    frame = write_results_csv(rows, out_dir / 'results.csv')
    plot_sweep(frame, out_dir / 'sweep.png')
    ctx.echo(out_dir)
    print(format_result_rows(rows))
    return 0


def cmd_changedet(ctx: Context, args: argparse.Namespace) -> int:
    """Train the change decoder on synthetic pairs and report validation F1."""
    ev = ctx.config.eval
    encoder = _encoder(ctx, args)
    world = _world(ctx, patch_size=2 * ev.change_patch_size)
    train_pairs = make_change_pairs(world, ev.n_change_train, seed=2 * ctx.config.seed)
    val_pairs = make_change_pairs(world, ev.n_change_val, seed=2 * ctx.config.seed + 1)
    config = ev.change_config(seed=ctx.config.seed)

    decoder, train_metrics = train_change_decoder(encoder, train_pairs, config)
    eval_pairs = val_pairs or train_pairs
    metrics = evaluate_change(encoder, decoder, eval_pairs, config)
    out_dir = ctx.results_dir / 'changedet'
    rows = [
        {
            'task': 'changedet',
            'mode': 'frozen',
            'fraction': 1.0,
            'seed': ctx.config.seed,
            'metric_name': name,
            'metric_value': value,
            'epoch_of_best': config.epochs,
        }
        for name, value in (('precision', metrics.precision), ('recall', metrics.recall), ('f1', metrics.f1))
    ]
    write_results_csv(rows, out_dir / 'results.csv')
    for i, pair in enumerate(eval_pairs[: args.figures]):
        pred = predict_pair(encoder, decoder, pair, config)
        save_change_figure(pair.image_a, pair.image_b, pair.gt_mask, pred, out_dir / f"pair_{i:02d}.png")
    ctx.echo(out_dir)
    print(format_change_metrics(train_metrics, 'training'))
    print(format_change_metrics(metrics, 'validation' if val_pairs else 'training'))
    return 0


def cmd_plot(ctx: Context, args: argparse.Namespace) -> int:
    """Re-render plots from the CSVs of the run and results directories."""
    rendered = []
    log_path = ctx.runs_dir / 'pretrain' / 'train_log.csv'
    if log_path.exists():
        rendered.append(plot_training_log(log_path, log_path.with_suffix('.png')))
    sweep_csv = ctx.results_dir / 'sweep' / 'results.csv'
    if sweep_csv.exists():
        rendered.append(plot_sweep(read_results_csv(sweep_csv), sweep_csv.with_name('sweep.png')))
    if not rendered:
        logger.warning("Nothing to plot under %s", ctx.workdir)
    for path in rendered:
        print(f"Wrote {path}")
    return 0


def configure_determinism(config: RunConfig) -> None:
    """Single-threaded, deterministic kernels when ``io.deterministic`` is set."""
    np.random.seed(config.seed)
    torch.manual_seed(config.seed)
    if config.io.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)
