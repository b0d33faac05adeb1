"""Output formatting utilities for run summaries."""

from typing import Any

from .config import RunConfig
from .models import MaskMetrics


def format_sample_summary(stats: dict[str, Any]) -> str:
    """Format the outcome of a dataset build."""
    result = f"""Dataset: {stats.get('root', 'Unknown')}
Accepted locations: {stats.get('accepted', 0)}
Rejected candidates: {stats.get('rejected', 0)}"""

    skipped = stats.get('skipped', 0)
    if skipped:
        result += f"\nAlready on disk (skipped): {skipped}"
    return result


def format_training_summary(checkpoint: str, log_rows: list[dict[str, Any]]) -> str:
    """Format the final step of a pre-training run."""
    if not log_rows:
        return f"Checkpoint: {checkpoint}\nNo training steps were run"
    last = log_rows[-1]
    return f"""Checkpoint: {checkpoint}
Steps: {int(float(last['step'])) + 1}
Final loss: total {float(last['total']):.4f} (L0 {float(last['L0']):.4f}, L1 {float(last['L1']):.4f}, L2 {float(last['L2']):.4f})
Final lr: {float(last['lr']):.2e}"""


def format_result_rows(rows: list[dict[str, Any]]) -> str:
    """Format evaluation rows as an aligned table."""
    if not rows:
        return "No results"

    formatted = [f"{'task':<10}{'mode':<10}{'fraction':>9}{'seed':>6}  {'metric':<9}{'value':>9}{'best@':>7}"]
    formatted.append("-" * len(formatted[0]))
    for row in rows:
        formatted.append(
            f"{row['task']:<10}{row['mode']:<10}{float(row['fraction']):>9.3f}{int(row['seed']):>6}  "
            f"{row['metric_name']:<9}{float(row['metric_value']):>9.4f}{int(row['epoch_of_best']):>7}"
        )
    return "\n".join(formatted)


def format_change_metrics(metrics: MaskMetrics, label: str = 'validation') -> str:
    """Format change-class metrics."""
    return f"""Change detection ({label}):
Precision: {metrics.precision:.4f}
Recall: {metrics.recall:.4f}
F1: {metrics.f1:.4f}
Pixels: tp={metrics.tp} fp={metrics.fp} fn={metrics.fn}"""


def format_paper_scale(config: RunConfig) -> str:
    """Format the large-scale pre-training setup that desk runs scale down from."""
    learner = config.learner
    return f"""PAPER-SCALE PRE-TRAINING (not run at desk scale):
==================================================
Locations: {config.sampler.n_locations} x 5 dates, sigma {config.sampler.sigma_km:g} km, max cloud {config.sampler.max_cloud:.0%}
Input size: {config.views.out_size} px
Encoder widths: {', '.join(str(w) for w in learner.widths)}
Projection: {learner.num_subspaces} sub-spaces x {learner.proj_dim} dims, queues of {learner.queue_size}
Temperature: {learner.temperature}   Momentum coefficient: {learner.momentum_coef}
Optimiser: SGD lr {learner.base_lr}, momentum {learner.momentum}, weight decay {learner.weight_decay:g}
Schedule: {learner.epochs} epochs, batch {learner.batch_size}, lr x{learner.lr_decay:g} at {', '.join(f'{m:.0%}' for m in learner.milestones)}"""
