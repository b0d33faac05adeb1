#!/usr/bin/env python3
"""Run sample -> pretrain -> probe twice on the smoke config and compare the results CSVs byte for byte."""

import argparse
import sys
import tempfile
from pathlib import Path

from experiment_common import SMOKE_CONFIG, configure_logging, prepare_workdir, report, seco


def pipeline(workdir: Path, seed: int) -> bytes:
    prepare_workdir(workdir)
    for command in ("sample", "pretrain", "probe"):
        seco(command, workdir, "--seed", str(seed), config=SMOKE_CONFIG)
    return (workdir / "results" / "probe" / "results.csv").read_bytes()


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args()
    configure_logging(args.verbose)

    with tempfile.TemporaryDirectory(prefix="seco-e2e-") as tmp:
        first = pipeline(Path(tmp) / "a", args.seed)
        second = pipeline(Path(tmp) / "b", args.seed)
    return report(
        "end-to-end determinism",
        first == second,
        f"results CSV {'identical' if first == second else 'differs'} across two runs ({len(first)} bytes)",
    )


if __name__ == "__main__":
    sys.exit(main())
