"""MLP noise predictor ε_θ(x_t, t) over a flat parameter vector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffgraph as dg


@dataclass(frozen=True)
class DenoiserArch:
    input_dim: int
    hidden_dims: tuple = (128, 128)
    embed_dim: int = 32
    activation: str = "silu"
    max_period: float = 10000.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ValueError("dimensions must be positive")
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ValueError("embed_dim must be a positive even integer")
        if self.activation != "silu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim + self.embed_dim, *self.hidden_dims, self.input_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes())

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "embed_dim": self.embed_dim,
            "activation": self.activation,
            "max_period": self.max_period,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserArch":
        return cls(int(d["input_dim"]), tuple(int(h) for h in d["hidden_dims"]),
                   int(d["embed_dim"]), str(d.get("activation", "silu")),
                   float(d.get("max_period", 10000.0)))


def embed_time(t, embed_dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding, interleaved as [sin(f0 t), cos(f0 t), sin(f1 t), ...].

    Frequencies are ``max_period ** (-k / (embed_dim/2))`` for k = 0..embed_dim/2-1.
    ``t`` may be an int (returns shape (embed_dim,)) or an int array (returns (n, embed_dim)).
    """
    if embed_dim % 2 or embed_dim < 2:
        raise ValueError("embed_dim must be a positive even integer")
    t_arr = np.asarray(t)
    if np.any(t_arr < 1):
        raise ValueError("timesteps start at 1")
    half = embed_dim // 2
    freqs = max_period ** (-np.arange(half) / half)
    angles = np.multiply.outer(t_arr.astype(np.float64), freqs)
    out = np.empty(angles.shape[:-1] + (embed_dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def init_params(arch: DenoiserArch, seed: int) -> np.ndarray:
    """Uniform fan-in init: every weight and bias ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in arch.layer_shapes():
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(rng.uniform(-bound, bound, size=fan_out))
    return np.concatenate(chunks)


def _layers(arch: DenoiserArch, flat: dg.Node):
    off = 0
    for fan_in, fan_out in arch.layer_shapes():
        W = dg.view(flat, off, (fan_in, fan_out))
        off += fan_in * fan_out
        b = dg.view(flat, off, (fan_out,))
        off += fan_out
        yield W, b


def forward(arch: DenoiserArch, params, x, t_embed) -> dg.Node:
    """Network output for a batch: x (n, input_dim), t_embed (n, embed_dim)."""
    params = dg.as_node(params)
    if params.value.shape != (arch.n_params,):
        raise ValueError(f"expected {arch.n_params} parameters, got {params.value.shape}")
    x = dg.as_node(x)
    if x.value.ndim != 2 or x.value.shape[1] != arch.input_dim:
        raise ValueError(f"input must have shape (n, {arch.input_dim}), got {x.value.shape}")
    t_embed = np.asarray(t_embed, dtype=np.float64)
    if t_embed.shape != (x.value.shape[0], arch.embed_dim):
        raise ValueError(f"time embedding shape {t_embed.shape} does not match batch")
    h = dg.concat(x, t_embed)
    layers = list(_layers(arch, params))
    for W, b in layers[:-1]:
        h = dg.silu(dg.affine(h, W, b))
    W, b = layers[-1]
    return dg.affine(h, W, b)


def predict_noise(arch: DenoiserArch, params, x_t, t, T: int | None = None) -> dg.Node:
    """ε̂ for a batch of noisy points.

    ``x_t`` is (n, input_dim) or a single vector (treated as n=1); ``t`` an int
    or length-n int array. Pass a ``Node`` as params to get a differentiable result.
    """
    x_t = np.asarray(x_t.value if isinstance(x_t, dg.Node) else x_t, dtype=np.float64)
    if x_t.ndim == 1:
        x_t = x_t[None, :]
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (x_t.shape[0],))
    if np.any(t < 1) or (T is not None and np.any(t > T)):
        raise ValueError(f"timestep out of range: {t.min()}..{t.max()}")
    return forward(arch, params, x_t, embed_time(t, arch.embed_dim, arch.max_period))


def predict_noise_value(arch: DenoiserArch, params: np.ndarray, x_t, t) -> np.ndarray:
    """Plain-array convenience wrapper around ``predict_noise``."""
    x_t = np.asarray(x_t, dtype=np.float64)
    out = predict_noise(arch, params, x_t, t).value
    return out[0] if x_t.ndim == 1 else out
