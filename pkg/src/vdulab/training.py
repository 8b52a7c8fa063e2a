"""Minibatch Adam training on the ε-matching loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffgraph as dg
from .checkpoints import Checkpoint
from .denoiser import DenoiserArch, init_params
from .diffusion import ddpm_train_loss
from .optim import Adam, clip_grad_norm
from .schedule import NoiseSchedule


@dataclass
class TrainResult:
    params: np.ndarray
    step_losses: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)


def train_ddpm(schedule: NoiseSchedule, arch: DenoiserArch, x: np.ndarray, params: np.ndarray, *,
               epochs: int, lr: float, batch_size: int, seed: int, grad_clip: float | None = None,
               lr_final: float | None = None, snapshot_every: int | None = None,
               meta: dict | None = None) -> TrainResult:
    """Train from ``params`` on normalized data ``x``.

    Batches come from a fresh permutation each epoch; one (t, ε) draw per
    sample. With ``lr_final`` set, the step size follows a per-epoch cosine
    from ``lr`` down to ``lr_final``. With ``snapshot_every`` set, a checkpoint is recorded at every
    epoch divisible by it (epochs counted from 1).
    """
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    opt = Adam(lr)
    result = TrainResult(np.array(params, dtype=np.float64, copy=True))
    theta = result.params
    for epoch in range(1, epochs + 1):
        if lr_final is not None:
            opt.lr = lr_final + 0.5 * (lr - lr_final) * (1 + np.cos(np.pi * (epoch - 1) / max(epochs - 1, 1)))
        perm = rng.permutation(len(x))
        losses = []
        for start in range(0, len(x), batch_size):
            batch = x[perm[start:start + batch_size]]
            loss, g = dg.value_and_grad(
                lambda p: ddpm_train_loss(schedule, arch, p, batch, rng), theta)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            theta = opt.step(theta, clip_grad_norm(g, grad_clip))
            losses.append(loss)
        result.step_losses.extend(losses)
        result.epoch_losses.append(float(np.mean(losses)))
        if snapshot_every and epoch % snapshot_every == 0:
            result.snapshots.append(Checkpoint(arch, schedule.params(), theta.copy(),
                                               dict(meta or {}, epoch=epoch)))
    result.params = theta
    return result


def pretrain(schedule: NoiseSchedule, arch: DenoiserArch, x: np.ndarray, *, epochs: int, lr: float,
             batch_size: int, seed: int, init_seed: int, lr_final: float | None = None,
             snapshot_every: int | None = None, meta: dict | None = None) -> tuple[Checkpoint, TrainResult]:
    """One pre-training run from ``init_params(arch, init_seed)``; returns the final checkpoint."""
    meta = dict(meta or {}, seed=seed, init_seed=init_seed)
    res = train_ddpm(schedule, arch, x, init_params(arch, init_seed), epochs=epochs, lr=lr,
                     batch_size=batch_size, seed=seed, lr_final=lr_final,
                     snapshot_every=snapshot_every, meta=meta)
    final = Checkpoint(arch, schedule.params(), res.params, dict(meta, epoch=epochs))
    return final, res
