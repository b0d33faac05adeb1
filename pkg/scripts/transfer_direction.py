#!/usr/bin/env python3
"""Linear probe of a pre-trained encoder against a random-init frozen encoder.

Pre-trains once per seed on the desk config and probes both encoders on the
synthetic land-cover task. Passes when the pre-trained encoder wins by at least
``--margin`` mAP (median over seeds).
"""

import argparse
import statistics
import sys
import tempfile
from pathlib import Path

from experiment_common import configure_logging, prepare_workdir, probe_metric, report, seco


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--margin", type=float, default=0.05)
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args()
    configure_logging(args.verbose)

    pretrained, random_init = [], []
    with tempfile.TemporaryDirectory(prefix="seco-transfer-") as tmp:
        for seed in args.seeds:
            workdir = prepare_workdir(Path(tmp) / f"seed{seed}")
            seco("sample", workdir, "--seed", str(seed))
            seco("pretrain", workdir, "--seed", str(seed))
            seco("probe", workdir, "--seed", str(seed))
            pretrained.append(probe_metric(workdir))
            seco("probe", workdir, "--seed", str(seed), "--random-init")
            random_init.append(probe_metric(workdir))
            print(f"seed {seed}: pre-trained {pretrained[-1]:.4f}  random init {random_init[-1]:.4f}")

    gap = statistics.median(pretrained) - statistics.median(random_init)
    return report("transfer direction", gap >= args.margin, f"median mAP gap {gap:+.4f} (need >= {args.margin})")


if __name__ == "__main__":
    sys.exit(main())
