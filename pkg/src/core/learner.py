"""Momentum-contrast learner with three projection sub-spaces.

Sub-space 0 is invariant to every augmentation, sub-space 1 only to the
seasonal change and sub-space 2 only to the artificial transforms. The
``moco`` and ``moco_tp`` methods train a single sub-space as baselines.
"""

import copy
import csv
import json
import logging
import math
import time
from collections.abc import Sequence
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from .config import LearnerConfig, TrainConfig, ViewsConfig
from .models import SeasonalStack
from .networks import Encoder, ProjectionHead
from .views import (
    apply_artificial,
    collate_pairs,
    collate_views,
    draw_aug_params,
    make_pair_views,
    make_views,
    resize,
    to_tensor,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'seco-checkpoint'
CHECKPOINT_VERSION = 1
TRAIN_LOG_FIELDS = ('step', 'epoch', 'lr', 'L0', 'L1', 'L2', 'total', 'wall_ms')
NORM_TOLERANCE = 1e-5


class NonFiniteError(RuntimeError):
    """Non-finite activations or loss; ``diagnostics`` describes where."""

    def __init__(self, message: str, diagnostics: dict[str, Any] | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CheckpointError(Exception):
    """A checkpoint file is missing, unreadable or of an unknown format."""

    pass


class EmbeddingQueue(nn.Module):
    """Fixed-capacity FIFO of unit vectors, stored as a ring buffer."""

    storage: torch.Tensor
    ptr: torch.Tensor
    count: torch.Tensor

    def __init__(self, capacity: int, dim: int):
        super().__init__()
        if capacity <= 0 or dim <= 0:
            raise ValueError(f"queue capacity and dim must be positive, got {capacity}, {dim}")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.register_buffer('storage', torch.zeros(self.capacity, self.dim))
        self.register_buffer('ptr', torch.zeros((), dtype=torch.long))
        self.register_buffer('count', torch.zeros((), dtype=torch.long))

    def __len__(self) -> int:
        return int(self.count)

    def contents(self) -> torch.Tensor:
        """Stored keys, oldest first."""
        n = int(self.count)
        if n < self.capacity:
            return self.storage[:n]
        p = int(self.ptr)
        return torch.cat([self.storage[p:], self.storage[:p]])

    @torch.no_grad()
    def push(self, keys: torch.Tensor) -> None:
        """Append ``keys`` (B x dim) in batch order, evicting the oldest entries."""
        keys = keys.detach()
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise ValueError(f"expected keys of shape (B, {self.dim}), got {tuple(keys.shape)}")
        if keys.shape[0] == 0:
            return
        off_unit = (keys.norm(dim=1) - 1.0).abs() > NORM_TOLERANCE
        if bool(off_unit.any()):
            logger.warning("Renormalising %d non-unit keys before enqueueing", int(off_unit.sum()))
            keys = F.normalize(keys, dim=1)
        keys = keys.to(self.storage.dtype)
        if keys.shape[0] >= self.capacity:
            self.storage.copy_(keys[-self.capacity:])
            self.ptr.fill_(0)
            self.count.fill_(self.capacity)
            return
        p = int(self.ptr)
        idx = (p + torch.arange(keys.shape[0])) % self.capacity
        self.storage[idx] = keys
        self.ptr.fill_((p + keys.shape[0]) % self.capacity)
        self.count.fill_(min(int(self.count) + keys.shape[0], self.capacity))


class ViewEmbeddings(NamedTuple):
    """Per-sub-space embeddings of one batch; ``k1``/``k2`` are None for pair methods."""

    q: tuple[torch.Tensor, ...]
    k0: tuple[torch.Tensor, ...]
    k1: tuple[torch.Tensor, ...] | None = None
    k2: tuple[torch.Tensor, ...] | None = None


class SecoState(nn.Module):
    """Online and momentum encoders, their heads, the queues and the step counter."""

    step: torch.Tensor

    def __init__(self, config: LearnerConfig):
        super().__init__()
        self.config = config
        self.temperature = float(config.temperature)
        self.momentum_coef = float(config.momentum_coef)
        self.encoder = Encoder(config.widths)
        self.heads = nn.ModuleList(
            ProjectionHead(config.feature_dim, config.proj_dim) for _ in range(config.num_subspaces)
        )
        self.momentum_encoder = copy.deepcopy(self.encoder)
        self.momentum_heads = copy.deepcopy(self.heads)
        for p in self.momentum_parameters():
            p.requires_grad_(False)
        self.queues = nn.ModuleList(
            EmbeddingQueue(config.queue_size, config.proj_dim) for _ in range(config.num_subspaces)
        )
        self.register_buffer('step', torch.zeros((), dtype=torch.long))

    @property
    def num_subspaces(self) -> int:
        return len(self.heads)

    def online_parameters(self) -> list[nn.Parameter]:
        return list(self.encoder.parameters()) + list(self.heads.parameters())

    def momentum_parameters(self) -> list[nn.Parameter]:
        return list(self.momentum_encoder.parameters()) + list(self.momentum_heads.parameters())


def build_state(config: LearnerConfig) -> SecoState:
    """Seeded initialisation; the momentum copy starts equal to the online network."""
    torch.manual_seed(config.seed)
    return SecoState(config)


def _check_vectors(q: torch.Tensor, k_pos: torch.Tensor, negatives: torch.Tensor) -> None:
    if q.shape[-1] != k_pos.shape[-1]:
        raise ValueError(f"query and positive dimensions differ: {q.shape[-1]} vs {k_pos.shape[-1]}")
    if negatives.numel() and negatives.shape[-1] != q.shape[-1]:
        raise ValueError(
            f"negative dimension {negatives.shape[-1]} does not match query dimension {q.shape[-1]}"
        )


def info_nce(
    q: torch.Tensor,
    k_pos: torch.Tensor,
    negatives: torch.Tensor | Sequence[torch.Tensor],
    tau: float,
) -> torch.Tensor:
    """InfoNCE of a single query; 0 exactly when there are no negatives.

    Args:
        q: unit query vector (d,)
        k_pos: unit positive key (d,)
        negatives: (n, d) tensor or a list of (d,) vectors
        tau: temperature > 0
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if not isinstance(negatives, torch.Tensor):
        negatives = torch.stack(list(negatives)) if len(negatives) else q.new_zeros((0, q.shape[-1]))
    _check_vectors(q, k_pos, negatives)
    if negatives.shape[0] == 0:
        return q.new_zeros(())
    logits = torch.cat([(q * k_pos).sum().reshape(1), negatives @ q]) / tau
    return (torch.logsumexp(logits, dim=0) - logits[0]).clamp_min(0.0)


def info_nce_batch(
    q: torch.Tensor,
    k_pos: torch.Tensor,
    queue: torch.Tensor,
    tau: float,
    hard_negatives: torch.Tensor | None = None,
) -> torch.Tensor:
    """Per-sample InfoNCE for a batch.

    Args:
        q: (B, d) queries
        k_pos: (B, d) positives
        queue: (K, d) negatives shared by every sample
        tau: temperature
        hard_negatives: optional (B, E, d) negatives private to each sample

    Returns:
        (B,) losses
    """
    _check_vectors(q, k_pos, queue)
    parts = [(q * k_pos).sum(dim=1, keepdim=True)]
    if queue.shape[0]:
        parts.append(q @ queue.T)
    if hard_negatives is not None and hard_negatives.shape[1]:
        _check_vectors(q, k_pos, hard_negatives)
        parts.append(torch.einsum('bd,bed->be', q, hard_negatives))
    if len(parts) == 1:
        return q.new_zeros(q.shape[0])
    logits = torch.cat(parts, dim=1) / tau
    return (torch.logsumexp(logits, dim=1) - logits[:, 0]).clamp_min(0.0)


def _assert_finite(name: str, tensor: torch.Tensor, step: int) -> None:
    if not bool(torch.isfinite(tensor).all()):
        bad = int((~torch.isfinite(tensor)).sum())
        raise NonFiniteError(
            f"non-finite values in {name} at step {step}",
            {'where': name, 'step': step, 'non_finite': bad, 'shape': list(tensor.shape)},
        )


def _embed(encoder: nn.Module, heads: nn.ModuleList, x: torch.Tensor, name: str, step: int):
    v = encoder(x)
    _assert_finite(name, v, step)
    return tuple(head(v) for head in heads)


def forward_views(state: SecoState, batch: dict[str, torch.Tensor]) -> ViewEmbeddings:
    """Queries through the online path, every key through the momentum path.

    ``batch`` holds ``x_q, x_k0, x_k1, x_k2`` (seco) or ``x_q, x_k`` (pair methods).
    """
    step = int(state.step)
    x_q = batch['x_q']
    if x_q.shape[0] == 0:
        raise ValueError("forward_views needs a non-empty batch")
    q = _embed(state.encoder, state.heads, x_q, 'online encoder', step)
    with torch.no_grad():
        if 'x_k' in batch:
            k = _embed(state.momentum_encoder, state.momentum_heads, batch['x_k'], 'momentum encoder', step)
            return ViewEmbeddings(q=q, k0=k)
        b = x_q.shape[0]
        keys = torch.cat([batch['x_k0'], batch['x_k1'], batch['x_k2']])
        z = _embed(state.momentum_encoder, state.momentum_heads, keys, 'momentum encoder', step)
        k0 = tuple(t[:b] for t in z)
        k1 = tuple(t[b : 2 * b] for t in z)
        k2 = tuple(t[2 * b :] for t in z)
    return ViewEmbeddings(q=q, k0=k0, k1=k1, k2=k2)


def seco_loss(
    embeddings: ViewEmbeddings,
    queues: Sequence[torch.Tensor],
    tau: float,
    multi_positive_z0: bool = False,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """(total, L0, L1, L2), each a batch mean; total is the unweighted sum.

    Z1 and Z2 add the same-instance keys of the other views as hard negatives.
    For single sub-space embeddings (``k1`` is None) L1 = L2 = 0.
    """
    q, k0, k1, k2 = embeddings
    if k1 is None or k2 is None:
        l0 = info_nce_batch(q[0], k0[0], queues[0], tau).mean()
        zero = l0.new_zeros(())
        return l0, l0, zero, zero

    if multi_positive_z0:
        l0 = torch.stack(
            [info_nce_batch(q[0], k[0], queues[0], tau) for k in (k0, k1, k2)]
        ).mean(dim=0).mean()
    else:
        l0 = info_nce_batch(q[0], k0[0], queues[0], tau).mean()
    l1 = info_nce_batch(q[1], k1[1], queues[1], tau, torch.stack([k0[1], k2[1]], dim=1)).mean()
    l2 = info_nce_batch(q[2], k2[2], queues[2], tau, torch.stack([k0[2], k1[2]], dim=1)).mean()
    return l0 + l1 + l2, l0, l1, l2


@torch.no_grad()
def momentum_update(state: SecoState, m: float | None = None) -> None:
    """theta' <- m * theta' + (1 - m) * theta for the encoder and every head."""
    m = state.momentum_coef if m is None else float(m)
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum coefficient must lie in [0, 1], got {m}")
    for p_q, p_k in zip(state.online_parameters(), state.momentum_parameters()):
        p_k.copy_(p_k * m + p_q * (1.0 - m))


def queue_push(queue: EmbeddingQueue, keys: torch.Tensor) -> EmbeddingQueue:
    queue.push(keys)
    return queue


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Piecewise-constant schedule: divide by ``1/lr_decay`` at each milestone fraction."""
    if total_steps <= 0:
        return config.base_lr
    progress = step / total_steps
    passed = sum(1 for milestone in config.milestones if progress >= milestone)
    return config.base_lr * config.lr_decay**passed


def make_optimizer(state: SecoState, config: TrainConfig) -> torch.optim.SGD:
    """SGD over the online encoder and heads only."""
    return torch.optim.SGD(
        state.online_parameters(),
        lr=config.base_lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )


def _queue_contents(state: SecoState) -> list[torch.Tensor]:
    return [queue.contents() for queue in state.queues]  # type: ignore[operator]


def train_step(
    state: SecoState,
    batch: dict[str, torch.Tensor],
    optimizer: torch.optim.Optimizer,
    lr: float | None = None,
) -> dict[str, float]:
    """One optimisation step.

    Order: forward, loss, gradient step on the online network, momentum update,
    enqueue the designated positive key of each sub-space, step counter.

    Raises:
        NonFiniteError: the loss or an activation is not finite
    """
    if lr is not None:
        for group in optimizer.param_groups:
            group['lr'] = lr
    state.train()
    embeddings = forward_views(state, batch)
    total, l0, l1, l2 = seco_loss(
        embeddings, _queue_contents(state), state.temperature, state.config.multi_positive_z0
    )
    step = int(state.step)
    if not bool(torch.isfinite(total)):
        raise NonFiniteError(
            f"non-finite loss at step {step}",
            {'where': 'loss', 'step': step, 'L0': float(l0), 'L1': float(l1), 'L2': float(l2)},
        )
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    momentum_update(state)

    positives = (embeddings.k0,) if embeddings.k1 is None else (embeddings.k0, embeddings.k1, embeddings.k2)
    for i, queue in enumerate(state.queues):
        queue_push(queue, positives[i][i])  # type: ignore[index, arg-type]
    state.step += 1
    return {
        'total': float(total),
        'L0': float(l0),
        'L1': float(l1),
        'L2': float(l2),
        'lr': float(optimizer.param_groups[0]['lr']),
    }


@torch.no_grad()
def evaluate_batch(state: SecoState, batch: dict[str, torch.Tensor]) -> dict[str, float]:
    """Loss of a fixed batch against the current queues, without any update."""
    state.eval()
    total, l0, l1, l2 = seco_loss(
        forward_views(state, batch),
        _queue_contents(state),
        state.temperature,
        state.config.multi_positive_z0,
    )
    return {'total': float(total), 'L0': float(l0), 'L1': float(l1), 'L2': float(l2)}


def make_batch(
    stacks: Sequence[SeasonalStack],
    rngs: Sequence[np.random.Generator],
    views_config: ViewsConfig,
    method: str,
) -> dict[str, torch.Tensor]:
    """Views for a batch of stacks, one generator per stack."""
    if method == 'seco':
        return collate_views([make_views(s, r, views_config) for s, r in zip(stacks, rngs)])
    temporal = method == 'moco_tp'
    return collate_pairs(
        [make_pair_views(s, r, views_config, temporal=temporal) for s, r in zip(stacks, rngs)]
    )


def save_checkpoint(
    path: str | Path,
    state: SecoState,
    optimizer: torch.optim.Optimizer | None = None,
    epoch: int = 0,
    run_config: dict[str, Any] | None = None,
) -> Path:
    """Write a self-describing checkpoint (atomically, through a temp file)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'config': state.config.model_dump(mode='json'),
        'run_config': run_config,
        'state_dict': state.state_dict(),
        'queues': _queue_contents(state),
        'optimizer': optimizer.state_dict() if optimizer is not None else None,
        'step': int(state.step),
        'epoch': int(epoch),
    }
    tmp = path.with_name(path.name + '.tmp')
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint {path} not found")
    try:
        payload = torch.load(path, map_location='cpu', weights_only=True)
    except Exception as e:
        raise CheckpointError(f"Failed to read checkpoint {path}: {str(e)}") from e
    if not isinstance(payload, dict) or payload.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint of this pipeline")
    if payload.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"Unsupported checkpoint version {payload.get('version')} in {path}; "
            f"expected {CHECKPOINT_VERSION}"
        )
    return payload


def load_checkpoint(path: str | Path) -> tuple[SecoState, dict[str, Any]]:
    """Rebuild the learner state of a checkpoint; returns it with the raw payload."""
    payload = read_checkpoint(path)
    try:
        config = LearnerConfig.model_validate(payload['config'])
        state = SecoState(config)
        state.load_state_dict(payload['state_dict'])
    except Exception as e:
        raise CheckpointError(f"Checkpoint {path} does not match its config: {str(e)}") from e
    return state, payload


def load_encoder(path: str | Path) -> Encoder:
    """Online encoder of a checkpoint, in eval mode."""
    state, _ = load_checkpoint(path)
    encoder = state.encoder
    encoder.eval()
    return encoder


def random_encoder(config: LearnerConfig, seed: int = 0) -> Encoder:
    """Untrained encoder of the same architecture, for the random-init baseline."""
    torch.manual_seed(seed)
    encoder = Encoder(config.widths)
    encoder.eval()
    return encoder


def latest_checkpoint(ckpt_dir: str | Path) -> Path | None:
    ckpt_dir = Path(ckpt_dir)
    epochs = sorted(ckpt_dir.glob('epoch_*.pt'))
    return epochs[-1] if epochs else None


def _write_log_rows(path: Path, rows: list[dict[str, Any]]) -> None:
    new = not path.exists()
    with path.open('a', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=TRAIN_LOG_FIELDS)
        if new:
            writer.writeheader()
        writer.writerows(rows)


def _truncate_log(path: Path, max_step: int) -> None:
    """Drop log rows past a resumed checkpoint so the log never repeats a step."""
    if not path.exists():
        return
    with path.open(newline='', encoding='utf-8') as f:
        rows = [r for r in csv.DictReader(f) if int(r['step']) < max_step]
    path.unlink()
    _write_log_rows(path, rows)


def pretrain(
    dataset: Sequence[SeasonalStack],
    config: LearnerConfig,
    views_config: ViewsConfig,
    out_dir: str | Path,
    resume: bool = False,
    run_config: dict[str, Any] | None = None,
    progress: bool = True,
) -> Path:
    """Pre-train on a dataset of stacks and return the final checkpoint path.

    Every epoch visits a seeded permutation of the locations in full batches
    (the remainder is dropped). Views of location ``i`` in epoch ``e`` come from
    a generator seeded with ``(seed, e, i)``, so a resumed run sees the same data.

    Writes ``train_log.csv``, ``checkpoints/epoch_XXXX.pt`` every
    ``checkpoint_every`` epochs and at the end, and ``final.pt``.

    Raises:
        ValueError: fewer locations than one batch
        NonFiniteError: training diverged; ``diagnostics.json`` is written first
    """
    n = len(dataset)
    if n < config.batch_size:
        raise ValueError(f"dataset has {n} locations, fewer than batch_size={config.batch_size}")
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / 'checkpoints'
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / 'train_log.csv'

    steps_per_epoch = n // config.batch_size
    total_steps = steps_per_epoch * config.epochs
    state = build_state(config)
    optimizer = make_optimizer(state, config)
    start_epoch = 0

    latest = latest_checkpoint(ckpt_dir) if resume else None
    if latest is not None:
        payload = read_checkpoint(latest)
        state.load_state_dict(payload['state_dict'])
        if payload.get('optimizer') is not None:
            optimizer.load_state_dict(payload['optimizer'])
        start_epoch = int(payload['epoch'])
        _truncate_log(log_path, int(state.step))
        logger.info("Resuming from %s at epoch %d (step %d)", latest, start_epoch, int(state.step))
    elif log_path.exists():
        log_path.unlink()

    final = ckpt_dir / f"epoch_{config.epochs:04d}.pt"
    try:
        for epoch in range(start_epoch, config.epochs):
            order = np.random.default_rng([config.seed, epoch]).permutation(n)
            rows = []
            batches = range(steps_per_epoch)
            for b in tqdm(batches, desc=f"epoch {epoch + 1}/{config.epochs}", disable=not progress, leave=False):
                started = time.perf_counter()
                indices = [int(i) for i in order[b * config.batch_size : (b + 1) * config.batch_size]]
                batch = make_batch(
                    [dataset[i] for i in indices],
                    [np.random.default_rng([config.seed, epoch, i]) for i in indices],
                    views_config,
                    config.method,
                )
                step = int(state.step)
                metrics = train_step(state, batch, optimizer, lr=lr_at(step, total_steps, config))
                rows.append(
                    {
                        'step': step,
                        'epoch': epoch,
                        'lr': metrics['lr'],
                        'L0': metrics['L0'],
                        'L1': metrics['L1'],
                        'L2': metrics['L2'],
                        'total': metrics['total'],
                        'wall_ms': round((time.perf_counter() - started) * 1000.0, 3),
                    }
                )
            _write_log_rows(log_path, rows)
            logger.info(
                "Epoch %d/%d done: step %d, last loss %.4f",
                epoch + 1,
                config.epochs,
                int(state.step),
                rows[-1]['total'],
            )
            if (epoch + 1) % config.checkpoint_every == 0 or epoch + 1 == config.epochs:
                save_checkpoint(ckpt_dir / f"epoch_{epoch + 1:04d}.pt", state, optimizer, epoch + 1, run_config)
    except NonFiniteError as e:
        (out_dir / 'diagnostics.json').write_text(
            json.dumps({'error': str(e), **e.diagnostics}, indent=2), encoding='utf-8'
        )
        logger.error("Training aborted: %s (diagnostics in %s)", e, out_dir / 'diagnostics.json')
        raise

    if not final.exists():
        save_checkpoint(final, state, optimizer, config.epochs, run_config)
    final_path = out_dir / 'final.pt'
    final_path.write_bytes(final.read_bytes())
    return final_path


@torch.no_grad()
def subspace_similarity(
    state: SecoState,
    stacks: Sequence[SeasonalStack],
    rng: np.random.Generator,
    views_config: ViewsConfig,
) -> dict[str, list[float]]:
    """Mean cosine similarity per sub-space of seasonal and of artificial pairs.

    A seasonal pair is two dates of one location without artificial transforms;
    an artificial pair is one image and an augmented copy of it.
    """
    state.eval()
    seasonal_a, seasonal_b, artificial_b = [], [], []
    for stack in stacks:
        t0, t1 = (int(t) for t in rng.choice(len(stack.patches), size=2, replace=False))
        image0 = to_tensor(stack.patches[t0].pixels)
        seasonal_a.append(resize(image0, views_config.out_size))
        seasonal_b.append(resize(to_tensor(stack.patches[t1].pixels), views_config.out_size))
        artificial_b.append(apply_artificial(image0, draw_aug_params(rng, views_config)))

    def embed(images: list[torch.Tensor]) -> tuple[torch.Tensor, ...]:
        v = state.encoder(torch.stack(images))
        return tuple(head(v) for head in state.heads)

    anchor = embed(seasonal_a)
    seasonal = embed(seasonal_b)
    artificial = embed(artificial_b)
    return {
        'seasonal': [float((a * s).sum(dim=1).mean()) for a, s in zip(anchor, seasonal)],
        'artificial': [float((a * t).sum(dim=1).mean()) for a, t in zip(anchor, artificial)],
    }


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_checksum(module: nn.Module) -> float:
    """Order-fixed float64 sum of |theta|, used to detect any parameter change."""
    return math.fsum(float(p.detach().double().abs().sum()) for p in module.parameters())
