"""Discrete-time DDPM noise schedules.

All public accessors take 1-based timesteps ``t in 1..T``. Arrays are stored
0-based, so ``schedule.alpha_bar[t - 1]`` is the cumulative product up to t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    T: int
    beta: np.ndarray
    beta_start: float = float("nan")
    beta_end: float = float("nan")
    alpha: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)
    posterior_var: np.ndarray = field(init=False, repr=False)
    loss_weight: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.shape != (self.T,):
            raise ValueError(f"beta must have shape ({self.T},), got {beta.shape}")
        if not np.all((beta > 0) & (beta < 1)):
            raise ValueError("beta entries must lie in (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        # alpha_bar_{t-1} with the convention alpha_bar_0 = 1
        alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
        posterior_var = np.zeros(self.T)
        loss_weight = np.zeros(self.T)
        # use 1 - alpha (not beta) so the stored vectors satisfy the closed forms
        # exactly in terms of the stored alpha
        one_minus_alpha = 1.0 - alpha[1:]
        posterior_var[1:] = one_minus_alpha * (1.0 - alpha_bar_prev[1:]) / (1.0 - alpha_bar[1:])
        loss_weight[1:] = one_minus_alpha / (alpha[1:] * (1.0 - alpha_bar_prev[1:]))
        for name, arr in (("beta", beta), ("alpha", alpha), ("alpha_bar", alpha_bar),
                          ("posterior_var", posterior_var), ("loss_weight", loss_weight)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def _check(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range 1..{self.T}: {t}")
        return t - 1

    def alpha_at(self, t):
        return self.alpha[self._check(t)]

    def alpha_bar_at(self, t):
        return self.alpha_bar[self._check(t)]

    def alpha_bar_prev_at(self, t):
        """ᾱ_{t-1}, with ᾱ_0 = 1."""
        i = self._check(t)
        return np.where(i > 0, self.alpha_bar[np.maximum(i - 1, 0)], 1.0)

    def posterior_var_at(self, t):
        return self.posterior_var[self._check(t)]

    def loss_weight_at(self, t):
        return self.loss_weight[self._check(t)]

    def params(self) -> dict:
        """Construction parameters, enough to rebuild the schedule exactly."""
        out = {"kind": self.kind, "T": self.T}
        if self.kind == "linear":
            out["beta_start"] = self.beta_start
            out["beta_end"] = self.beta_end
        return out


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if T < 2:
        raise ValueError("T must be at least 2")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule("linear", T, beta, float(beta_start), float(beta_end))


def _cosine_alpha_bar(u: float, s: float = 0.008) -> float:
    return math.cos((u + s) / (1 + s) * math.pi / 2) ** 2


def make_cosine_schedule(T: int, max_beta: float = 0.999) -> NoiseSchedule:
    """Cosine ᾱ profile with betas clipped to ``max_beta``."""
    if T < 2:
        raise ValueError("T must be at least 2")
    beta = np.array([
        min(1.0 - _cosine_alpha_bar((i + 1) / T) / _cosine_alpha_bar(i / T), max_beta)
        for i in range(T)
    ])
    return NoiseSchedule("cosine", T, beta)


def schedule_from_params(params: dict) -> NoiseSchedule:
    kind = params["kind"]
    if kind == "linear":
        return make_linear_schedule(int(params["T"]), float(params["beta_start"]),
                                    float(params["beta_end"]))
    if kind == "cosine":
        return make_cosine_schedule(int(params["T"]))
    raise ValueError(f"unknown schedule kind {kind!r}")
