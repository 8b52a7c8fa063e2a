"""DDPM forward process, Gaussian posteriors, training loss and ancestral sampler."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffgraph as dg
from .denoiser import DenoiserArch, predict_noise
from .schedule import NoiseSchedule

# predictor(params, x_t (n, dim), t (n,)) -> Node of shape (n, dim)
Predictor = Callable[[object, np.ndarray, np.ndarray], dg.Node]


@dataclass
class PosteriorParams:
    mean: np.ndarray
    var: float


def network_predictor(arch: DenoiserArch, T: int | None = None) -> Predictor:
    def predict(params, x_t, t):
        return predict_noise(arch, params, x_t, t, T)
    return predict


def _col(v):
    return np.asarray(v, dtype=np.float64).reshape(-1, 1)


def forward_noise(schedule: NoiseSchedule, x0, t, eps) -> np.ndarray:
    """x_t = sqrt(ᾱ_t) x0 + sqrt(1-ᾱ_t) eps. Batched when x0 is 2-D and t an array."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and eps {eps.shape} differ in shape")
    ab = schedule.alpha_bar_at(t)
    if x0.ndim == 2:
        ab = _col(np.broadcast_to(ab, (x0.shape[0],)))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def _require_t2(t):
    if np.any(np.asarray(t) < 2):
        raise ValueError("posteriors are defined for t >= 2")


def true_posterior(schedule: NoiseSchedule, x_t, x0, t: int) -> PosteriorParams:
    """q(x_{t-1} | x_t, x0) from the data-space form of the mean."""
    _require_t2(t)
    a, ab, ab_prev = schedule.alpha_at(t), schedule.alpha_bar_at(t), schedule.alpha_bar_prev_at(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    mean = (np.sqrt(a) * (1 - ab_prev) * x_t + np.sqrt(ab_prev) * (1 - a) * x0) / (1 - ab)
    return PosteriorParams(mean, float(schedule.posterior_var_at(t)))


def posterior_mean_from_eps(schedule: NoiseSchedule, x_t, eps, t):
    """x_t/sqrt(α_t) - (1-α_t)/(sqrt(1-ᾱ_t) sqrt(α_t)) * eps. Batched over rows."""
    a, ab = schedule.alpha_at(t), schedule.alpha_bar_at(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.ndim == 2:
        a = _col(np.broadcast_to(a, (x_t.shape[0],)))
        ab = _col(np.broadcast_to(ab, (x_t.shape[0],)))
    return (x_t - (1 - a) / np.sqrt(1 - ab) * np.asarray(eps)) / np.sqrt(a)


def model_posterior(schedule: NoiseSchedule, arch: DenoiserArch, params, x_t, t: int,
                    predictor: Predictor | None = None) -> PosteriorParams:
    _require_t2(t)
    predictor = predictor or network_predictor(arch, schedule.T)
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = predictor(params, np.atleast_2d(x_t), np.array([t])).value.reshape(x_t.shape)
    return PosteriorParams(posterior_mean_from_eps(schedule, x_t, eps_hat, t),
                           float(schedule.posterior_var_at(t)))


def kl_posteriors(schedule: NoiseSchedule, true: PosteriorParams, model: PosteriorParams,
                  t: int | None = None) -> float:
    """KL(true || model) for isotropic Gaussians sharing one variance."""
    var = true.var
    if t is not None:
        var = float(schedule.posterior_var_at(t))
    if not np.isclose(true.var, model.var, rtol=1e-9, atol=0) or not np.isclose(true.var, var, rtol=1e-9, atol=0):
        raise ValueError(f"variance mismatch: {true.var} vs {model.var}")
    diff = np.asarray(true.mean) - np.asarray(model.mean)
    return float(np.sum(diff * diff) / (2.0 * var))


def gaussian_kl(mean_p, var_p, mean_q, var_q) -> float:
    """General KL(N(mean_p, var_p I) || N(mean_q, var_q I)) in k dimensions."""
    mean_p, mean_q = np.atleast_1d(mean_p), np.atleast_1d(mean_q)
    k = mean_p.size
    diff = mean_q - mean_p
    return 0.5 * (k * np.log(var_q / var_p) - k + k * var_p / var_q + diff @ diff / var_q)


def draw_noise_and_t(schedule: NoiseSchedule, n: int, dim: int, rng: np.random.Generator,
                     t_low: int = 1):
    """One (t, eps) draw per sample; t uniform on t_low..T."""
    t = rng.integers(t_low, schedule.T + 1, size=n)
    eps = rng.standard_normal((n, dim))
    return t, eps


def noise_errors(schedule: NoiseSchedule, predictor: Predictor, params, x0, t, eps) -> dg.Node:
    """Per-row ||eps - ε_θ(x_t, t)||² with x_t from the forward process."""
    x_t = forward_noise(schedule, x0, t, eps)
    return dg.row_sq_norm(dg.sub(eps, predictor(params, x_t, t)))


def ddpm_train_loss(schedule: NoiseSchedule, arch: DenoiserArch, params, x0,
                    rng: np.random.Generator, predictor: Predictor | None = None) -> dg.Node:
    """Simple ε-matching loss, mean over the batch, one (t, ε) draw per sample."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    predictor = predictor or network_predictor(arch, schedule.T)
    t, eps = draw_noise_and_t(schedule, x0.shape[0], x0.shape[1], rng)
    errs = noise_errors(schedule, predictor, params, x0, t, eps)
    return dg.weighted_sum(errs, np.full(x0.shape[0], 1.0 / x0.shape[0]))


def elbo_kl_terms(schedule: NoiseSchedule, arch: DenoiserArch, params, x0,
                  rng: np.random.Generator) -> np.ndarray:
    """Per-timestep E[KL(q(x_{t-1}|x_t,x0) || p_θ(x_{t-1}|x_t))] for t = 2..T.

    Uses the closed form (1-α_t)/(2α_t(1-ᾱ_{t-1})) ||ε0 - ε̂||² with one
    ε draw per (sample, t). Entry 0 corresponds to t=2.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n, dim = x0.shape
    ts = np.arange(2, schedule.T + 1)
    t = np.repeat(ts, n)
    eps = rng.standard_normal((t.size, dim))
    errs = noise_errors(schedule, network_predictor(arch, schedule.T), params,
                        np.tile(x0, (ts.size, 1)), t, eps).value
    return 0.5 * schedule.loss_weight_at(ts) * errs.reshape(ts.size, n).mean(axis=1)


def chain_noise(seed: int, n_samples: int, T: int, dim: int) -> np.ndarray:
    """Noise for ancestral sampling, shape (T, n, dim).

    Chain i draws its T rows from its own stream spawned from ``seed``; row 0
    is x_T, row k (k >= 1) is the noise added when stepping t = T-k+1 -> t-1.
    """
    out = np.empty((T, n_samples, dim))
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(n_samples)):
        out[:, i, :] = np.random.default_rng(child).standard_normal((T, dim))
    return out


def sample(schedule: NoiseSchedule, arch: DenoiserArch, params, n_samples: int, seed: int,
           predictor: Predictor | None = None, noise: np.ndarray | None = None) -> np.ndarray:
    """Ancestral sampling; the final step (t=1) returns the mean without noise."""
    predictor = predictor or network_predictor(arch, schedule.T)
    T, dim = schedule.T, arch.input_dim
    if noise is None:
        noise = chain_noise(seed, n_samples, T, dim)
    x = noise[0].copy()
    for k, t in enumerate(range(T, 0, -1), start=1):
        t_vec = np.full(n_samples, t)
        eps_hat = predictor(params, x, t_vec).value
        x = posterior_mean_from_eps(schedule, x, eps_hat, t)
        if t > 1:
            x = x + np.sqrt(schedule.posterior_var_at(t)) * noise[k]
    return x
