#!/usr/bin/env python3
"""Command-line entry point: ``seco <subcommand> [options]``."""

import argparse
import logging
import sys
from collections.abc import Sequence
from typing import Any

from cli.commands import (
    Context,
    cmd_changedet,
    cmd_plot,
    cmd_pretrain,
    cmd_probe,
    cmd_sample,
    cmd_sweep,
    configure_determinism,
)
from core.catalog import CatalogError
from core.config import ConfigError, load_config, parse_override
from core.geosampler import CityFileError
from core.learner import CheckpointError

logger = logging.getLogger(__name__)

EXIT_FAILURE = 1
EXIT_USAGE = 2
LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help="YAML run configuration")
    common.add_argument('--workdir', default='.', help="base directory of every relative path")
    common.add_argument(
        '--set',
        dest='overrides',
        action='append',
        default=[],
        metavar='SECTION.KEY=VALUE',
        help="override a config key (repeatable)",
    )
    common.add_argument('--seed', type=int, help="run seed (overrides config and SECO_SEED)")
    common.add_argument('--log-level', help="DEBUG, INFO, WARNING or ERROR")
    return common


def _checkpoint_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--checkpoint', help="pre-trained checkpoint (default: runs/pretrain/final.pt)")
    parser.add_argument('--random-init', action='store_true', help="use an untrained encoder instead")
    parser.add_argument('--epochs', type=int, help="evaluation epochs")


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = argparse.ArgumentParser(
        prog='seco',
        description="Seasonal contrastive pre-training: dataset collection, pre-training and evaluation",
    )
    sub = parser.add_subparsers(dest='command', required=True)

    sample = sub.add_parser('sample', parents=[common], help="collect seasonal stacks")
    sample.add_argument('--n', type=int, help="number of locations")
    sample.add_argument('--catalog', choices=['synthetic', 'local'])
    sample.add_argument('--catalog-dir')
    sample.add_argument('--strategy', choices=['gaussian', 'uniform'])
    sample.add_argument('--cities', help="cities TSV file")
    sample.add_argument('--out', help="dataset directory")

    pretrain = sub.add_parser('pretrain', parents=[common], help="momentum-contrast pre-training")
    pretrain.add_argument('--resume', action='store_true', help="continue from the latest checkpoint")
    pretrain.add_argument('--paper-scale', action='store_true', help="print the large-scale setup and exit")
    pretrain.add_argument('--epochs', type=int)
    pretrain.add_argument('--batch-size', type=int)
    pretrain.add_argument('--method', choices=['seco', 'moco', 'moco_tp'])

    for name, text in (('probe', "linear probe"), ('finetune', "fine-tune encoder and classifier")):
        p = sub.add_parser(name, parents=[common], help=text)
        _checkpoint_options(p)
        p.add_argument('--fraction', type=float, default=1.0, help="fraction of training labels")
        p.add_argument('--all-seeds', action='store_true', help="one run per eval.seeds entry")

    sweep = sub.add_parser('sweep', parents=[common], help="label-efficiency sweep")
    _checkpoint_options(sweep)
    sweep.add_argument('--mode', choices=['linear', 'finetune'])

    changedet = sub.add_parser('changedet', parents=[common], help="change detection on feature differences")
    _checkpoint_options(changedet)
    changedet.add_argument('--figures', type=int, default=4, help="number of qualitative figures")

    sub.add_parser('plot', parents=[common], help="re-render plots from CSV outputs")
    return parser


def _flag_overrides(args: argparse.Namespace) -> dict[str, Any]:
    """Named flags as dotted config overrides; they win over ``--set``."""
    overrides: dict[str, Any] = {}
    for text in args.overrides:
        key, value = parse_override(text)
        overrides[key] = value
    mapping = {
        'seed': 'seed',
        'log_level': 'io.log_level',
        'n': 'sampler.n_locations',
        'catalog': 'sampler.catalog',
        'catalog_dir': 'sampler.catalog_dir',
        'strategy': 'sampler.strategy',
        'cities': 'sampler.cities_path',
        'out': 'io.dataset_dir',
        'batch_size': 'learner.batch_size',
        'method': 'learner.method',
        'checkpoint': 'io.checkpoint',
    }
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value.upper() if attr == 'log_level' else value
    epochs = getattr(args, 'epochs', None)
    if epochs is not None:
        if args.command == 'pretrain':
            overrides['learner.epochs'] = epochs
        elif args.command == 'changedet':
            overrides['eval.change_epochs'] = epochs
        else:
            overrides['eval.epochs'] = epochs
    return overrides


def _configure_logging(level: str) -> None:
    numeric = logging.getLevelName(level.upper())
    if not isinstance(numeric, int):
        raise ConfigError(f"unknown log level '{level}'")
    logging.basicConfig(level=numeric, format=LOG_FORMAT, stream=sys.stderr, force=True)


def run(argv: Sequence[str] | None = None) -> int:
    """Parse arguments, resolve the config and dispatch; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE

    try:
        config, source = load_config(args.config, _flag_overrides(args))
        _configure_logging(config.io.log_level)
    except ConfigError as e:
        print(f"Configuration error: {str(e)}", file=sys.stderr)
        return EXIT_USAGE

    ctx = Context(config, source, args.workdir)
    configure_determinism(config)
    handlers = {
        'sample': lambda: cmd_sample(ctx, args),
        'pretrain': lambda: cmd_pretrain(ctx, args),
        'probe': lambda: cmd_probe(ctx, args, 'linear'),
        'finetune': lambda: cmd_probe(ctx, args, 'finetune'),
        'sweep': lambda: cmd_sweep(ctx, args),
        'changedet': lambda: cmd_changedet(ctx, args),
        'plot': lambda: cmd_plot(ctx, args),
    }
    try:
        return handlers[args.command]()
    except (ConfigError, CityFileError, CheckpointError, FileNotFoundError) as e:
        logger.error("%s", e)
        print(f"Error: {str(e)}", file=sys.stderr)
        return EXIT_USAGE
    except CatalogError as e:
        logger.error("Catalog failure: %s", e)
        return EXIT_FAILURE
    except Exception as e:
        logger.exception("Command '%s' failed: %s", args.command, e)
        return EXIT_FAILURE


def main() -> None:
    """Main entry point for the ``seco`` script."""
    sys.exit(run())


if __name__ == "__main__":
    main()
