#!/usr/bin/env python3
"""Check that the sub-spaces specialise: Z1 tolerates seasons, Z2 tolerates artificial transforms.

Pre-trains a small model for at least 2,000 steps on a 512-location desk
dataset, then measures mean cosine similarity of seasonal pairs and of
artificially augmented pairs on held-out locations, per sub-space.
"""

import argparse
import statistics
import sys
import tempfile
from pathlib import Path

import numpy as np

from experiment_common import DESK_CONFIG, configure_logging, prepare_workdir, report, seco

from core.config import load_config  # noqa: E402  (path set up by experiment_common)
from core.geosampler import SeasonalStackDataset  # noqa: E402
from core.learner import load_checkpoint, subspace_similarity  # noqa: E402

MODEL = (
    "--set", "learner.widths=[8, 16, 32]",
    "--set", "learner.proj_dim=16",
    "--set", "learner.queue_size=1024",
    "--set", "learner.epochs=250",
    "--set", "learner.batch_size=64",
)


def similarities(root: Path, seed: int, n_heldout: int) -> dict[str, list[float]]:
    workdir = prepare_workdir(root / f"seed{seed}")
    seco("sample", workdir, "--seed", str(seed))
    seco("pretrain", workdir, "--seed", str(seed), *MODEL)
    seco("sample", workdir, "--seed", str(10_000 + seed), "--n", str(n_heldout), "--out", "heldout")

    config, _ = load_config(DESK_CONFIG, {"seed": seed}, env=False)
    state, _ = load_checkpoint(workdir / "runs" / "pretrain" / "final.pt")
    stacks = SeasonalStackDataset(workdir / "heldout")
    return subspace_similarity(state, [stacks[i] for i in range(len(stacks))], np.random.default_rng(seed), config.views)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--heldout", type=int, default=128)
    parser.add_argument("--margin", type=float, default=0.05)
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args()
    configure_logging(args.verbose)

    seasonal_gap, artificial_gap = [], []
    with tempfile.TemporaryDirectory(prefix="seco-invariance-") as tmp:
        for seed in args.seeds:
            sims = similarities(Path(tmp), seed, args.heldout)
            seasonal_gap.append(sims["seasonal"][1] - sims["seasonal"][2])
            artificial_gap.append(sims["artificial"][2] - sims["artificial"][1])
            print(
                f"seed {seed}: seasonal Z0/Z1/Z2 {' '.join(f'{s:.3f}' for s in sims['seasonal'])}  "
                f"artificial Z0/Z1/Z2 {' '.join(f'{s:.3f}' for s in sims['artificial'])}"
            )

    seasonal = statistics.median(seasonal_gap)
    artificial = statistics.median(artificial_gap)
    return report(
        "invariance emergence",
        seasonal >= args.margin and artificial >= args.margin,
        f"seasonal Z1-Z2 {seasonal:+.3f}, artificial Z2-Z1 {artificial:+.3f} (need >= {args.margin})",
    )


if __name__ == "__main__":
    sys.exit(main())
