"""Variational diffusion unlearning: plasticity inducer, stability regularizer, update loop.

The loss minimized during unlearning is

    L(θ) = -(1-γ) Σ_{t=2..T} w_t E_{x0∈D_f, ε0} ||ε0 - ε_θ(√ᾱ_t x0 + √(1-ᾱ_t) ε0, t)||²
           + γ Σ_i (θ_i - μ*_i)² / (2 σ*_i²)

with w_t = (1-α_t) / (α_t (1-ᾱ_{t-1})). The first term raises the denoising
error on the forget set; the second keeps θ near the pre-trained posterior.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import diffgraph as dg
from .checkpoints import ParamPosteriorStats
from .denoiser import DenoiserArch
from .diffusion import Predictor, forward_noise, network_predictor
from .optim import Adam, clip_grad_norm
from .schedule import NoiseSchedule
from .training import train_ddpm

MAX_FULL_SUM_T = 512
DEFAULT_T_SUBSAMPLE = 32


class NumericalAbort(RuntimeError):
    pass


@dataclass
class VduConfig:
    gamma: float = 0.5
    eta: float = 1e-4
    epochs: int = 5
    batch_size: int = 128
    t_subsample: int | str | None = None  # None: all timesteps when T <= 512, else 32
    grad_clip: float | None = 10.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.t_subsample not in (None, "all") and int(self.t_subsample) < 1:
            raise ValueError("t_subsample must be >= 1, 'all' or None")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive or None")


@dataclass
class UnlearnRunRecord:
    loss_a: list = field(default_factory=list)
    loss_b: list = field(default_factory=list)
    loss_total: list = field(default_factory=list)
    dist_to_mu: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)
    theta_u: np.ndarray | None = None

    def rows(self):
        for i in range(len(self.loss_total)):
            yield {"epoch": i + 1, "loss_a": self.loss_a[i], "loss_b": self.loss_b[i],
                   "loss_total": self.loss_total[i], "dist_to_mu": self.dist_to_mu[i],
                   "wall_clock": self.wall_clock[i]}


def choose_t_set(schedule: NoiseSchedule, t_subsample, rng: np.random.Generator) -> np.ndarray:
    """Timesteps for one estimate of the sum over t=2..T."""
    T = schedule.T
    if t_subsample == "all":
        if T > MAX_FULL_SUM_T:
            raise ValueError(f"full sum over t refused for T={T} > {MAX_FULL_SUM_T}")
        return np.arange(2, T + 1)
    if t_subsample is None:
        if T <= MAX_FULL_SUM_T:
            return np.arange(2, T + 1)
        t_subsample = DEFAULT_T_SUBSAMPLE
    m = min(int(t_subsample), T - 1)
    return np.sort(rng.choice(np.arange(2, T + 1), size=m, replace=False))


def plasticity_inducer(schedule: NoiseSchedule, arch: DenoiserArch, params, batch, t_set,
                       rng: np.random.Generator, predictor: Predictor | None = None) -> dg.Node:
    """-κ Σ_{t∈t_set} w_t mean_batch ||ε0 - ε_θ(x_t, t)||², κ = (T-1)/|t_set|.

    Draws one ε0 per (t, sample), t-major.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    t_set = np.asarray(t_set, dtype=np.int64)
    n, dim = batch.shape
    if n == 0 or t_set.size == 0:
        raise ValueError("empty batch or timestep set")
    if np.any(t_set < 2) or np.any(t_set > schedule.T):
        raise ValueError("timesteps must lie in 2..T")
    predictor = predictor or network_predictor(arch, schedule.T)
    kappa = (schedule.T - 1) / t_set.size
    t = np.repeat(t_set, n)
    eps = rng.standard_normal((t.size, dim))
    x0 = np.tile(batch, (t_set.size, 1))
    x_t = forward_noise(schedule, x0, t, eps)
    errs = dg.row_sq_norm(dg.sub(eps, predictor(params, x_t, t)))
    weights = -kappa * schedule.loss_weight_at(t) / n
    return dg.weighted_sum(errs, weights)


def stability_regularizer(params, stats: ParamPosteriorStats) -> dg.Node:
    """Σ_i (θ_i - μ*_i)² / (2 σ*_i²)."""
    params = dg.as_node(params)
    if params.value.shape != stats.mu_star.shape:
        raise ValueError(f"params have {params.value.size} entries, stats have {stats.d}")
    return dg.weighted_sum(dg.square(dg.sub(params, stats.mu_star)), 0.5 / stats.sigma_star ** 2)


def vdu_loss_terms(schedule, arch, params, batch, stats, config: VduConfig, rng,
                   t_set=None, predictor: Predictor | None = None):
    """(total, A, B) nodes; total = (1-γ)·A + γ·B with A already negated."""
    params = dg.as_node(params)
    if t_set is None:
        t_set = choose_t_set(schedule, config.t_subsample, rng)
    a = plasticity_inducer(schedule, arch, params, batch, t_set, rng, predictor)
    b = stability_regularizer(params, stats)
    total = dg.add(dg.scale(a, 1.0 - config.gamma), dg.scale(b, config.gamma))
    return total, a, b


def vdu_loss(schedule, arch, params, batch, stats, config: VduConfig, rng,
             t_set=None, predictor: Predictor | None = None) -> dg.Node:
    return vdu_loss_terms(schedule, arch, params, batch, stats, config, rng, t_set, predictor)[0]


def unlearn(schedule: NoiseSchedule, arch: DenoiserArch, theta_star: np.ndarray, D_f: np.ndarray,
            stats: ParamPosteriorStats, config: VduConfig) -> UnlearnRunRecord:
    """Adam on the VDU loss over minibatches of the (normalized) forget set, from θ*."""
    D_f = np.atleast_2d(np.asarray(D_f, dtype=np.float64))
    if len(D_f) == 0:
        raise ValueError("forget set is empty")
    rng = np.random.default_rng(config.seed)
    opt = Adam(config.eta)
    theta = np.array(theta_star, dtype=np.float64, copy=True)
    record = UnlearnRunRecord()
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(len(D_f))
        parts = []
        for s in range(0, len(D_f), config.batch_size):
            batch = D_f[perm[s:s + config.batch_size]]
            held = {}

            def loss_fn(p):
                total, a, b = vdu_loss_terms(schedule, arch, p, batch, stats, config, rng)
                held["a"], held["b"] = a, b
                return total

            loss, g = dg.value_and_grad(loss_fn, theta)
            if not (np.isfinite(loss) and np.all(np.isfinite(g))):
                raise NumericalAbort(
                    f"non-finite VDU loss/gradient at epoch {epoch}, batch offset {s}: "
                    f"loss={loss}, A={float(held['a'].value)}, B={float(held['b'].value)}")
            theta = opt.step(theta, clip_grad_norm(g, config.grad_clip))
            parts.append((float(held["a"].value), float(held["b"].value), loss))
        a_mean, b_mean, tot_mean = np.mean(parts, axis=0)
        record.loss_a.append(float(a_mean))
        record.loss_b.append(float(b_mean))
        record.loss_total.append(float(tot_mean))
        record.dist_to_mu.append(float(np.linalg.norm(theta - stats.mu_star)))
        record.wall_clock.append(time.perf_counter() - start)
    record.theta_u = theta
    return record


def finetune_with_retain(schedule: NoiseSchedule, arch: DenoiserArch, theta_star: np.ndarray,
                         D_r: np.ndarray, epochs: int = 1, eta: float = 1e-4, batch_size: int = 128,
                         seed: int = 0) -> np.ndarray:
    """Reference baseline: plain ε-matching training on the retained data, from θ*."""
    D_r = np.atleast_2d(np.asarray(D_r, dtype=np.float64))
    if len(D_r) == 0:
        raise ValueError("retained set is empty")
    if epochs == 0:
        return np.array(theta_star, dtype=np.float64, copy=True)
    return train_ddpm(schedule, arch, D_r, theta_star, epochs=epochs, lr=eta,
                      batch_size=batch_size, seed=seed).params
