"""Shared plumbing for the directional experiment scripts.

Every experiment drives the ``seco`` CLI in throwaway work directories so the
runs go through exactly the code path a user would take.
"""

import logging
import shutil
import sys
from pathlib import Path

import pandas as pd

REPO_ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(REPO_ROOT / "src"))

from cli.main import run  # noqa: E402

logger = logging.getLogger("experiments")

DESK_CONFIG = REPO_ROOT / "configs" / "desk.yaml"
SMOKE_CONFIG = REPO_ROOT / "configs" / "smoke.yaml"


class ExperimentError(RuntimeError):
    """A pipeline step failed before the experiment could measure anything."""


def prepare_workdir(path: Path) -> Path:
    """Fresh work directory with the bundled cities file in place."""
    if path.exists():
        shutil.rmtree(path)
    (path / "data").mkdir(parents=True)
    shutil.copy(REPO_ROOT / "data" / "cities.tsv", path / "data" / "cities.tsv")
    return path


def seco(command: str, workdir: Path, *args: str, config: Path = DESK_CONFIG) -> None:
    """Run one ``seco`` subcommand; raise on a non-zero exit code."""
    argv = [command, "--config", str(config), "--workdir", str(workdir), *args]
    logger.info("seco %s", " ".join(argv))
    code = run(argv)
    if code != 0:
        raise ExperimentError(f"'seco {command}' exited with {code}")


def probe_metric(workdir: Path) -> float:
    """Metric of the single row written by the last ``seco probe``."""
    frame = pd.read_csv(workdir / "results" / "probe" / "results.csv")
    return float(frame["metric_value"].iloc[0])


def report(name: str, passed: bool, detail: str) -> int:
    """Print the verdict line and return the process exit code."""
    print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
    return 0 if passed else 1


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
