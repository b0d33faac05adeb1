"""Results tables and static plots."""

import logging
from collections.abc import Iterable
from pathlib import Path
from typing import Any

import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ['task', 'mode', 'fraction', 'seed', 'metric_name', 'metric_value', 'epoch_of_best']


def results_frame(rows: Iterable[dict[str, Any]]) -> pd.DataFrame:
    rows = list(rows)
    unknown = sorted({key for row in rows for key in row} - set(RESULT_COLUMNS))
    if unknown:
        raise ValueError(f"unknown result columns: {', '.join(unknown)}")
    return pd.DataFrame(rows, columns=RESULT_COLUMNS)


def write_results_csv(rows: Iterable[dict[str, Any]], path: str | Path, append: bool = False) -> pd.DataFrame:
    """Write (or append to) a results CSV with the fixed column order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = results_frame(rows)
    if append and path.exists():
        frame = pd.concat([pd.read_csv(path), frame], ignore_index=True)
    frame.to_csv(path, index=False, float_format='%.10g')
    return frame


def read_results_csv(path: str | Path) -> pd.DataFrame:
    frame = pd.read_csv(path)
    missing = set(RESULT_COLUMNS) - set(frame.columns)
    if missing:
        raise ValueError(f"{path} lacks result columns: {', '.join(sorted(missing))}")
    return frame


def sweep_table(frame: pd.DataFrame) -> pd.DataFrame:
    """Median metric per (mode, fraction) over seeds."""
    return (
        frame.groupby(['mode', 'fraction'], as_index=False)['metric_value']
        .median()
        .sort_values(['mode', 'fraction'])
        .reset_index(drop=True)
    )


def plot_sweep(frame: pd.DataFrame, path: str | Path, title: str = 'Label efficiency') -> Path:
    """Metric against label fraction (log x axis), one line per mode."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = sweep_table(frame)
    metric = str(frame['metric_name'].iloc[0]) if len(frame) else 'metric'
    fig, ax = plt.subplots(figsize=(5, 4))
    for mode, group in table.groupby('mode'):
        ax.plot(group['fraction'] * 100, group['metric_value'], marker='o', label=str(mode))
    ax.set_xscale('log')
    ax.set_xlabel('labels used (%)')
    ax.set_ylabel(metric)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training_log(log_path: str | Path, path: str | Path) -> Path:
    """Per-sub-space and total loss against step."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    log = pd.read_csv(log_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for column in ('L0', 'L1', 'L2', 'total'):
        if column in log and log[column].abs().sum() > 0:
            ax.plot(log['step'], log[column], label=column)
    ax.set_xlabel('step')
    ax.set_ylabel('InfoNCE')
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_change_figure(
    image_a: np.ndarray, image_b: np.ndarray, gt_mask: np.ndarray, pred_mask: np.ndarray, path: str | Path
) -> Path:
    """Side-by-side before, after, ground truth and prediction."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, 4, figsize=(12, 3.2))
    panels = [
        (image_a, 'before', None),
        (image_b, 'after', None),
        (gt_mask, 'ground truth', 'gray'),
        (pred_mask, 'prediction', 'gray'),
    ]
    for ax, (image, title, cmap) in zip(axes, panels):
        ax.imshow(image, cmap=cmap, vmin=0 if cmap else None, vmax=1 if cmap else None)
        ax.set_title(title)
        ax.axis('off')
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
