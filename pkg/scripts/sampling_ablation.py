#!/usr/bin/env python3
"""Gaussian-around-cities against uniform-over-land location sampling.

Both arms pre-train on a synthetic world whose land-cover diversity sits near
city anchors, then probe the synthetic land-cover task. Passes when the
Gaussian arm is at least as good as the uniform arm (median over seeds).
"""

import argparse
import statistics
import sys
import tempfile
from pathlib import Path

from experiment_common import configure_logging, prepare_workdir, probe_metric, report, seco


def arm(root: Path, strategy: str, seed: int) -> float:
    workdir = prepare_workdir(root / f"{strategy}-seed{seed}")
    common = ("--seed", str(seed), "--set", "sampler.anchor_diversity=true")
    seco("sample", workdir, *common, "--strategy", strategy)
    seco("pretrain", workdir, *common)
    seco("probe", workdir, *common)
    return probe_metric(workdir)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args()
    configure_logging(args.verbose)

    results: dict[str, list[float]] = {"gaussian": [], "uniform": []}
    with tempfile.TemporaryDirectory(prefix="seco-ablation-") as tmp:
        for seed in args.seeds:
            for strategy in results:
                results[strategy].append(arm(Path(tmp), strategy, seed))
            print(f"seed {seed}: gaussian {results['gaussian'][-1]:.4f}  uniform {results['uniform'][-1]:.4f}")

    gaussian = statistics.median(results["gaussian"])
    uniform = statistics.median(results["uniform"])
    return report("sampling ablation", gaussian >= uniform, f"median mAP gaussian {gaussian:.4f} vs uniform {uniform:.4f}")


if __name__ == "__main__":
    sys.exit(main())
