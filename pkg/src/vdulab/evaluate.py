"""Unlearning metrics: forget-class counting, PUL, Gaussian Fréchet distance."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from . import diffgraph as dg
from .data import MixtureSpec
from .optim import Adam


class MetricError(ValueError):
    pass


# -- classifiers ---------------------------------------------------------------

class NearestModeClassifier:
    """Label of the closest mode center; near-ties (rel 1e-12) go to the lowest label."""

    def __init__(self, centers, labels):
        order = np.argsort(labels, kind="stable")
        self.centers = np.asarray(centers, dtype=np.float64)[order]
        self.labels = np.asarray(labels, dtype=np.int64)[order]

    @classmethod
    def from_mixture(cls, spec: MixtureSpec) -> "NearestModeClassifier":
        return cls(spec.centers, spec.labels)

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def classify(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.dim:
            raise MetricError(f"expected {self.dim}-dimensional points, got {x.shape[1]}")
        if not np.all(np.isfinite(x)):
            raise MetricError("cannot classify non-finite points")
        d2 = ((x[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
        tied = d2 <= d2.min(axis=1, keepdims=True) * (1 + 1e-12)
        out = self.labels[np.argmax(tied, axis=1)]
        return out[0] if single else out


class MLPClassifier:
    """One-hidden-layer SiLU net regressed onto one-hot targets; predicts by argmax.

    ``features`` returns the hidden layer, used for Fréchet distances on images.
    """

    def __init__(self, labels, W1, b1, W2, b2):
        self.labels = np.asarray(labels, dtype=np.int64)
        self.W1, self.b1, self.W2, self.b2 = W1, b1, W2, b2

    @property
    def dim(self) -> int:
        return self.W1.shape[0]

    @classmethod
    def fit(cls, x, y, hidden: int = 64, epochs: int = 5, lr: float = 1e-3,
            batch_size: int = 128, seed: int = 0) -> "MLPClassifier":
        x = np.asarray(x, dtype=np.float64)
        labels = np.unique(y)
        onehot = (np.asarray(y)[:, None] == labels[None, :]).astype(np.float64)
        k, m = x.shape[1], len(labels)
        rng = np.random.default_rng(seed)
        sizes = [(k, hidden), (hidden,), (hidden, m), (m,)]
        fan = [k, k, hidden, hidden]
        theta = np.concatenate([rng.uniform(-1, 1, int(np.prod(s))) / np.sqrt(f) for s, f in zip(sizes, fan)])

        def loss(p, xb, yb):
            W1 = dg.view(p, 0, sizes[0])
            b1 = dg.view(p, k * hidden, sizes[1])
            W2 = dg.view(p, k * hidden + hidden, sizes[2])
            b2 = dg.view(p, k * hidden + hidden + hidden * m, sizes[3])
            out = dg.affine(dg.silu(dg.affine(xb, W1, b1)), W2, b2)
            return dg.scale(dg.squared_error(out, yb), 1.0 / len(xb))

        opt = Adam(lr)
        for _ in range(epochs):
            perm = rng.permutation(len(x))
            for s in range(0, len(x), batch_size):
                idx = perm[s:s + batch_size]
                _, g = dg.value_and_grad(lambda p: loss(p, x[idx], onehot[idx]), theta)
                theta = opt.step(theta, g)
        o1, o2, o3 = k * hidden, k * hidden + hidden, k * hidden + hidden + hidden * m
        return cls(labels, theta[:o1].reshape(k, hidden), theta[o1:o2],
                   theta[o2:o3].reshape(hidden, m), theta[o3:])

    def features(self, x) -> np.ndarray:
        h = np.atleast_2d(np.asarray(x, dtype=np.float64)) @ self.W1 + self.b1
        return h * dg.sigmoid(h)

    def classify(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise MetricError("cannot classify non-finite points")
        out = self.labels[np.argmax(self.features(x) @ self.W2 + self.b2, axis=1)]
        return out[0] if x.ndim == 1 else out


# -- metrics -------------------------------------------------------------------

def pul(count_pre: int, count_post: int) -> float:
    """Percentage of Unlearning; negative when forget-class generations increased."""
    if count_pre <= 0:
        raise MetricError("PUL is undefined when the pre-trained model generates no forget samples")
    return 100.0 * (count_pre - count_post) / count_pre


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def gaussian_frechet(samples_a, samples_b, ridge: float = 1e-6) -> float:
    """Fréchet distance between Gaussian fits: ||μa-μb||² + Tr(Σa + Σb - 2(Σa Σb)^½).

    ``ridge``·I is added to both covariances. The matrix root is taken as
    (Σa^½ Σb Σa^½)^½, which is symmetric and has the same trace.
    """
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    dim = a.shape[1]
    if b.shape[1] != dim:
        raise MetricError("sample sets differ in dimension")
    if len(a) < dim + 1 or len(b) < dim + 1:
        raise MetricError(f"need at least {dim + 1} samples per set")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False)) + ridge * np.eye(dim)
    cov_b = np.atleast_2d(np.cov(b, rowvar=False)) + ridge * np.eye(dim)
    if not (np.all(np.isfinite(cov_a)) and np.all(np.isfinite(cov_b))):
        raise MetricError("non-finite covariance")
    root_a = _psd_sqrt(cov_a)
    cross = _psd_sqrt(root_a @ cov_b @ root_a)
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(value, 0.0)


# -- reports -------------------------------------------------------------------

@dataclass
class EvalReport:
    variant: str
    gamma: float
    n_samples: int
    count_forget_pretrained: int
    count_forget_unlearned: int
    pul_percent: float
    u_fid: float
    u_fid_pretrained: float
    sample_seed: int
    unlearn_seed: int


REPORT_COLUMNS = [f.name for f in fields(EvalReport)]


def _fmt_cell(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def write_reports_csv(path, reports: list[EvalReport]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            row = asdict(r)
            w.writerow([_fmt_cell(row[c]) for c in REPORT_COLUMNS])


def read_reports_csv(path) -> list[EvalReport]:
    types = {f.name: f.type for f in fields(EvalReport)}
    conv = {"str": str, "float": float, "int": int}
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != REPORT_COLUMNS:
            raise ValueError(f"unexpected CSV columns {reader.fieldnames}")
        for row in reader:
            out.append(EvalReport(**{k: conv[types[k]](v) for k, v in row.items()}))
    return out


def count_forget(classifier, samples, forget_labels) -> int:
    return int(np.isin(classifier.classify(samples), sorted(forget_labels)).sum())


def evaluate_unlearning(sample_fn: Callable[[np.ndarray, int, int], np.ndarray], theta_star, theta_u,
                        classifier, reference, forget_labels, n_samples: int, seed: int, *,
                        features: Callable | None = None, gamma: float = math.nan,
                        variant: str = "vdu", unlearn_seed: int = -1,
                        pre_samples: np.ndarray | None = None) -> EvalReport:
    """Sample both models with the same seed, count forget-class generations, score quality.

    ``sample_fn(params, n, seed)`` must return points in the classifier's
    coordinates. ``reference`` holds real points with forget labels removed.
    The u-FID analogue compares each model's non-forget samples to ``reference``
    (through ``features`` when given).
    """
    if n_samples < 1:
        raise MetricError("n_samples must be positive")
    if classifier.dim != np.asarray(reference).shape[1]:
        raise MetricError("classifier and reference data differ in dimension")
    features = features or (lambda z: z)
    if pre_samples is None:
        pre_samples = sample_fn(theta_star, n_samples, seed)
    post_samples = sample_fn(theta_u, n_samples, seed)
    forget = sorted(forget_labels)
    pre_labels = classifier.classify(pre_samples)
    post_labels = classifier.classify(post_samples)
    n_pre = int(np.isin(pre_labels, forget).sum())
    n_post = int(np.isin(post_labels, forget).sum())
    ref_feat = features(reference)
    fid_pre = gaussian_frechet(features(pre_samples[~np.isin(pre_labels, forget)]), ref_feat)
    fid_post = gaussian_frechet(features(post_samples[~np.isin(post_labels, forget)]), ref_feat)
    return EvalReport(variant, float(gamma), n_samples, n_pre, n_post, pul(n_pre, n_post),
                      fid_post, fid_pre, seed, unlearn_seed)
