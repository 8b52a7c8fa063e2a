"""Config-driven pipeline: pretrain, posterior stats, unlearn, evaluate, γ sweep.

Every seed is derived from the single master ``seed`` of the config:

    training data      seed + 1        held-out data     seed + 2
    network init       seed            (seed + r when pretrain.shared_init is false)
    pre-training run r seed + 100 + r
    unlearn/fine-tune  seed + 3        sampling          seed + 7
    classifier fit     seed + 5

Output layout under ``out_dir``::

    checkpoints/run{r}.vdu            final pre-training checkpoints (run 0 is θ*)
    checkpoints/run0_e{epoch}.vdu     late snapshots of run 0 for single-run stats
    pretrain.csv                      per-run loss and Fréchet distance to held-out data
    stats.vdus                        posterior statistics
    unlearned_g{γ}.vdu, trace_g{γ}.csv
    finetuned.vdu
    eval.csv, sweep.csv, robustness.csv
    samples_*.csv, *.svg              plot data
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import yaml

from . import plots
from .checkpoints import (Checkpoint, ParamPosteriorStats, collect_single_run_checkpoints,
                          estimate_posterior_stats, load_checkpoint, load_stats, save_checkpoint,
                          save_stats)
from .data import LabeledDataset, Normalization, load_idx, ring_mixture, sample_mixture, split_forget
from .denoiser import DenoiserArch
from .diffusion import sample
from .evaluate import (EvalReport, MLPClassifier, NearestModeClassifier, evaluate_unlearning,
                       gaussian_frechet, write_reports_csv)
from .schedule import schedule_from_params
from .training import pretrain
from .vdu import UnlearnRunRecord, VduConfig, finetune_with_retain, unlearn

log = logging.getLogger("vdulab")

TABLE2_GAMMAS = (0.0, 0.1, 0.3, 0.6, 0.8, 1.0)
TRACE_COLUMNS = ["epoch", "loss_a", "loss_b", "loss_total", "dist_to_mu"]
PRETRAIN_COLUMNS = ["run", "seed", "init_seed", "epochs", "final_loss", "fid_heldout"]


class ConfigError(ValueError):
    pass


# -- config --------------------------------------------------------------------

@dataclass
class DataConfig:
    kind: str = "mixture"  # mixture | idx
    n_modes: int = 8
    radius: float = 4.0
    std: float = 0.3
    n_train: int = 8000
    n_heldout: int = 8000
    images: str | None = None
    labels: str | None = None
    heldout_fraction: float = 0.2

    def __post_init__(self):
        if self.kind not in ("mixture", "idx"):
            raise ConfigError(f"data.kind must be 'mixture' or 'idx', got {self.kind!r}")
        if self.kind == "idx" and not (self.images and self.labels):
            raise ConfigError("data.kind=idx needs data.images and data.labels")
        if not 0 < self.heldout_fraction < 1:
            raise ConfigError("data.heldout_fraction must lie in (0, 1)")


@dataclass
class ScheduleConfig:
    kind: str = "linear"
    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2


@dataclass
class ArchConfig:
    hidden_dims: tuple = (128, 128)
    embed_dim: int = 32


@dataclass
class PretrainConfig:
    runs: int = 4
    epochs: int = 200
    lr: float = 2e-3
    lr_final: float | None = 1e-5
    batch_size: int = 128
    shared_init: bool = True

    def __post_init__(self):
        if self.runs < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("pretrain.runs, epochs and batch_size must be >= 1")


@dataclass
class StatsConfig:
    mode: str = "multi_run"  # multi_run | single_run
    n_runs: int | None = None  # multi_run: use runs 0..n_runs-1 (default: all)
    k: int = 4  # single_run: number of late snapshots of run 0
    spacing: int = 10  # single_run: epochs between snapshots
    sigma_floor: float | None = None

    def __post_init__(self):
        if self.mode not in ("multi_run", "single_run"):
            raise ConfigError(f"stats.mode must be multi_run or single_run, got {self.mode!r}")
        if self.k < 2 or self.spacing < 1:
            raise ConfigError("stats.k must be >= 2 and stats.spacing >= 1")


@dataclass
class UnlearnConfig:
    gamma: float = 0.1
    eta: float = 1e-4
    epochs: int = 10
    batch_size: int = 128
    t_subsample: int | str | None = "all"
    grad_clip: float | None = 10.0


@dataclass
class FinetuneConfig:
    epochs: int = 1
    eta: float = 1e-3
    batch_size: int = 128


@dataclass
class EvalConfig:
    n_samples: int = 2000
    forget_labels: tuple = (3,)
    classifier: str = "nearest_mode"  # nearest_mode | trained
    gammas: tuple = TABLE2_GAMMAS

    def __post_init__(self):
        if self.classifier not in ("nearest_mode", "trained"):
            raise ConfigError(f"eval.classifier must be nearest_mode or trained, got {self.classifier!r}")
        if self.n_samples < 1:
            raise ConfigError("eval.n_samples must be positive")
        if not self.forget_labels:
            raise ConfigError("eval.forget_labels is empty")
        if any(not 0 <= g <= 1 for g in self.gammas):
            raise ConfigError("eval.gammas must lie in [0, 1]")


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    stats: StatsConfig = field(default_factory=StatsConfig)
    unlearn: UnlearnConfig = field(default_factory=UnlearnConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.data.kind == "mixture" and self.eval.classifier == "nearest_mode":
            bad = [l for l in self.eval.forget_labels if not 0 <= l < self.data.n_modes]
            if bad:
                raise ConfigError(f"forget labels {bad} are not mixture labels")
        if self.data.kind == "idx" and self.eval.classifier == "nearest_mode":
            raise ConfigError("image data needs eval.classifier: trained")
        try:
            self.vdu_config(self.unlearn.gamma)
            schedule_from_params(asdict(self.schedule))
        except ValueError as e:
            raise ConfigError(str(e)) from e

    # seeds
    @property
    def data_seed(self) -> int:
        return self.seed + 1

    @property
    def heldout_seed(self) -> int:
        return self.seed + 2

    @property
    def unlearn_seed(self) -> int:
        return self.seed + 3

    @property
    def classifier_seed(self) -> int:
        return self.seed + 5

    @property
    def sample_seed(self) -> int:
        return self.seed + 7

    def run_seed(self, r: int) -> int:
        return self.seed + 100 + r

    def init_seed(self, r: int) -> int:
        return self.seed if self.pretrain.shared_init else self.seed + r

    def vdu_config(self, gamma: float) -> VduConfig:
        u = self.unlearn
        return VduConfig(gamma=float(gamma), eta=u.eta, epochs=u.epochs, batch_size=u.batch_size,
                         t_subsample=u.t_subsample, grad_clip=u.grad_clip, seed=self.unlearn_seed)

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _build(cls, raw, where: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else None
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}".lstrip("."))
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"bad value in {where or 'config'}: {e}") from e


def config_from_dict(raw: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, raw, "")


def load_config(path, *, out_dir=None, seed=None) -> ExperimentConfig:
    """Read a YAML config; ``out_dir`` and ``seed`` override the file."""
    try:
        with open(path) as f:
            raw = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    if out_dir is not None:
        raw["out_dir"] = str(out_dir)
    if seed is not None:
        raw["seed"] = int(seed)
    return config_from_dict(raw)


def dump_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=False)


# -- helpers -------------------------------------------------------------------

def gamma_tag(gamma: float) -> str:
    return f"{float(gamma):g}"


def write_trace_csv(path, record: UnlearnRunRecord) -> None:
    """Per-epoch loss components. Wall-clock is left out so reruns compare byte-for-byte."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in record.rows():
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in TRACE_COLUMNS[1:]])


def read_trace_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != TRACE_COLUMNS:
            raise ValueError(f"unexpected trace columns {reader.fieldnames}")
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in reader]


def _write_rows(path, columns, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


# -- pipeline ------------------------------------------------------------------

class Experiment:
    """One configured experiment; every stage reads and writes under ``out_dir``."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self._samples = {}

    # paths
    @property
    def ckpt_dir(self) -> Path:
        return self.out / "checkpoints"

    def run_path(self, r: int) -> Path:
        return self.ckpt_dir / f"run{r}.vdu"

    def snapshot_path(self, epoch: int) -> Path:
        return self.ckpt_dir / f"run0_e{epoch}.vdu"

    @property
    def stats_path(self) -> Path:
        return self.out / "stats.vdus"

    def unlearned_path(self, gamma: float) -> Path:
        return self.out / f"unlearned_g{gamma_tag(gamma)}.vdu"

    def trace_path(self, gamma: float, variant: str = "vdu") -> Path:
        prefix = "trace" if variant == "vdu" else f"trace_{variant}"
        return self.out / f"{prefix}_g{gamma_tag(gamma)}.csv"

    def _mkdirs(self):
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)

    # problem setup
    @cached_property
    def schedule(self):
        return schedule_from_params(asdict(self.cfg.schedule))

    @cached_property
    def mixture(self):
        d = self.cfg.data
        return ring_mixture(d.n_modes, d.radius, d.std) if d.kind == "mixture" else None

    @cached_property
    def datasets(self) -> tuple[LabeledDataset, LabeledDataset]:
        """(training set, held-out set), sharing the training normalization."""
        d = self.cfg.data
        if d.kind == "mixture":
            train = sample_mixture(self.mixture, d.n_train, self.cfg.data_seed)
            held = sample_mixture(self.mixture, d.n_heldout, self.cfg.heldout_seed, norm=train.norm)
            return train, held
        full = load_idx(d.images, d.labels)
        perm = np.random.default_rng(self.cfg.data_seed).permutation(len(full))
        n_held = max(1, int(round(d.heldout_fraction * len(full))))
        ident = Normalization.identity(full.dim)
        held = LabeledDataset(full.points[perm[:n_held]], full.labels[perm[:n_held]], ident)
        train = LabeledDataset(full.points[perm[n_held:]], full.labels[perm[n_held:]], ident)
        return train, held

    @cached_property
    def arch(self) -> DenoiserArch:
        a = self.cfg.arch
        return DenoiserArch(self.datasets[0].dim, tuple(a.hidden_dims), a.embed_dim)

    @cached_property
    def split(self):
        return split_forget(self.datasets[0], self.cfg.eval.forget_labels)

    @cached_property
    def reference(self) -> np.ndarray:
        """Held-out real points with the forget labels removed."""
        held = self.datasets[1]
        return held.points[~np.isin(held.labels, sorted(self.cfg.eval.forget_labels))]

    @cached_property
    def classifier(self):
        if self.cfg.eval.classifier == "nearest_mode":
            return NearestModeClassifier.from_mixture(self.mixture)
        train = self.datasets[0]
        return MLPClassifier.fit(train.points, train.labels, seed=self.cfg.classifier_seed)

    @property
    def features(self):
        # raw coordinates for 2-D data, classifier hidden layer for images
        return self.classifier.features if self.cfg.data.kind == "idx" else None

    @property
    def dataset_tag(self) -> str:
        d = self.cfg.data
        if d.kind == "mixture":
            return f"ring{d.n_modes}-r{d.radius:g}-s{d.std:g}-n{d.n_train}-seed{self.cfg.data_seed}"
        return f"idx-{Path(d.images).name}"

    def sample_points(self, params, n: int, seed: int) -> np.ndarray:
        """Generated points in data coordinates; memoized on (params, n, seed)."""
        key = (hashlib.sha1(np.ascontiguousarray(params).tobytes()).hexdigest(), n, seed)
        if key not in self._samples:
            z = sample(self.schedule, self.arch, params, n, seed)
            self._samples[key] = self.datasets[0].norm.denormalize(z)
        return self._samples[key]

    # stage: pretrain
    def run_pretrain(self) -> list[Path]:
        cfg, p = self.cfg, self.cfg.pretrain
        if p.epochs < cfg.stats.k * cfg.stats.spacing:
            raise ConfigError(f"pretrain.epochs={p.epochs} leaves fewer than stats.k={cfg.stats.k} "
                              f"snapshots at spacing {cfg.stats.spacing}")
        self._mkdirs()
        x = self.datasets[0].normalized()
        paths, rows = [], []
        for r in range(p.runs):
            t0 = time.perf_counter()
            final, res = pretrain(self.schedule, self.arch, x, epochs=p.epochs, lr=p.lr,
                                  batch_size=p.batch_size, seed=cfg.run_seed(r),
                                  init_seed=cfg.init_seed(r), lr_final=p.lr_final,
                                  snapshot_every=cfg.stats.spacing if r == 0 else None,
                                  meta={"run": r, "dataset": self.dataset_tag})
            save_checkpoint(self.run_path(r), final)
            paths.append(self.run_path(r))
            if r == 0:
                for snap in res.snapshots[-cfg.stats.k:]:
                    save_checkpoint(self.snapshot_path(int(snap.meta["epoch"])), snap)
            # score the stored (single-precision) parameters, as every later stage sees them
            params = load_checkpoint(self.run_path(r)).params
            fid = self._fid(self.sample_points(params, cfg.eval.n_samples, cfg.sample_seed),
                            self.datasets[1].points)
            rows.append({"run": r, "seed": cfg.run_seed(r), "init_seed": cfg.init_seed(r),
                         "epochs": p.epochs, "final_loss": res.epoch_losses[-1], "fid_heldout": fid})
            log.info("pretrain run %d: loss %.4f, Fréchet to held-out %.4f (%.1fs)",
                     r, res.epoch_losses[-1], fid, time.perf_counter() - t0)
        _write_rows(self.out / "pretrain.csv", PRETRAIN_COLUMNS, rows)
        return paths

    def _fid(self, a, b) -> float:
        f = self.features or (lambda z: z)
        return gaussian_frechet(f(a), f(b))

    # stage: stats
    def load_run(self, r: int) -> Checkpoint:
        return load_checkpoint(self.run_path(r), expected_arch=self.arch)

    @property
    def theta_star(self) -> np.ndarray:
        return self.load_run(0).params

    def single_run_checkpoints(self, k: int | None = None) -> list[Checkpoint]:
        k = k or self.cfg.stats.k
        spacing = self.cfg.stats.spacing

        def replay(spacing_epochs):
            found = sorted(self.ckpt_dir.glob("run0_e*.vdu"),
                           key=lambda q: int(q.stem.split("_e")[1]))
            snaps = [load_checkpoint(q, expected_arch=self.arch) for q in found]
            return [s for s in snaps if int(s.meta["epoch"]) % spacing_epochs == 0]

        return collect_single_run_checkpoints(replay, k, spacing)

    def compute_stats(self, mode: str | None = None, n: int | None = None) -> ParamPosteriorStats:
        st = self.cfg.stats
        mode = mode or st.mode
        if mode == "multi_run":
            n = n or st.n_runs or self.cfg.pretrain.runs
            if n < 2:
                raise ConfigError("multi-run statistics need at least two runs")
            cks = [self.load_run(r) for r in range(n)]
        else:
            cks = self.single_run_checkpoints(n)
        return estimate_posterior_stats(cks, st.sigma_floor, mode=mode)

    def run_stats(self) -> Path:
        stats = self.compute_stats()
        save_stats(self.stats_path, stats)
        log.info("stats (%s, %d checkpoints): median σ* %.3g, floor %.3g", stats.mode,
                 stats.n_checkpoints, float(np.median(stats.sigma_star)), stats.sigma_floor)
        return self.stats_path

    # stage: unlearn
    def run_unlearn(self, gamma: float | None = None, stats: ParamPosteriorStats | None = None,
                    variant: str = "vdu") -> tuple[UnlearnRunRecord, Path]:
        gamma = self.cfg.unlearn.gamma if gamma is None else gamma
        stats = stats or load_stats(self.stats_path)
        t0 = time.perf_counter()
        record = unlearn(self.schedule, self.arch, self.theta_star, self.split[0].normalized(), stats,
                         self.cfg.vdu_config(gamma))
        write_trace_csv(self.trace_path(gamma, variant), record)
        path = self.unlearned_path(gamma) if variant == "vdu" else \
            self.out / f"unlearned_{variant}_g{gamma_tag(gamma)}.vdu"
        save_checkpoint(path, Checkpoint(self.arch, self.schedule.params(), record.theta_u,
                                         {"gamma": float(gamma), "seed": self.cfg.unlearn_seed,
                                          "stats_mode": stats.mode, "stats_n": stats.n_checkpoints,
                                          "epoch": self.cfg.unlearn.epochs, "dataset": self.dataset_tag}))
        log.info("unlearn %s γ=%s: A %.3f, B %.3f (%.1fs)", variant, gamma_tag(gamma),
                 record.loss_a[-1], record.loss_b[-1], time.perf_counter() - t0)
        return record, path

    def run_finetune(self) -> Path:
        f = self.cfg.finetune
        theta = finetune_with_retain(self.schedule, self.arch, self.theta_star, self.split[1].normalized(),
                                     epochs=f.epochs, eta=f.eta, batch_size=f.batch_size,
                                     seed=self.cfg.unlearn_seed)
        path = self.out / "finetuned.vdu"
        save_checkpoint(path, Checkpoint(self.arch, self.schedule.params(), theta,
                                         {"seed": self.cfg.unlearn_seed, "epoch": f.epochs,
                                          "dataset": self.dataset_tag}))
        return path

    # stage: evaluate
    def evaluate(self, theta_u, *, gamma: float = math.nan, variant: str = "vdu") -> EvalReport:
        cfg = self.cfg
        theta_star = self.theta_star
        n, seed = cfg.eval.n_samples, cfg.sample_seed
        return evaluate_unlearning(self.sample_points, theta_star, theta_u, self.classifier, self.reference,
                                   cfg.eval.forget_labels, n, seed, features=self.features, gamma=gamma,
                                   variant=variant, unlearn_seed=cfg.unlearn_seed,
                                   pre_samples=self.sample_points(theta_star, n, seed))

    def _plot(self, name: str, panels: list[tuple[str, np.ndarray]]) -> None:
        """Write one labeled sample CSV per panel and, for 2-D data, one SVG."""
        drawn = []
        for title, params in panels:
            pts = self.sample_points(params, self.cfg.eval.n_samples, self.cfg.sample_seed)
            labels = self.classifier.classify(pts)
            plots.write_samples_csv(self.out / f"samples_{title}.csv", pts, labels)
            drawn.append((title, pts, labels))
        if self.datasets[0].dim == 2:
            plots.scatter_svg(self.out / f"{name}.svg", drawn)

    def run_eval(self) -> Path:
        gamma = self.cfg.unlearn.gamma
        theta_u = load_checkpoint(self.unlearned_path(gamma), expected_arch=self.arch).params
        reports = [self.evaluate(theta_u, gamma=gamma)]
        ft_path = self.run_finetune()
        reports.append(self.evaluate(load_checkpoint(ft_path).params, variant="finetune"))
        path = self.out / "eval.csv"
        write_reports_csv(path, reports)
        self._plot("eval", [("pretrained", self.theta_star), (f"vdu_g{gamma_tag(gamma)}", theta_u),
                            ("finetune", load_checkpoint(ft_path).params)])
        for r in reports:
            log.info("%s γ=%s: PUL %.1f, u-FID %.4f (pre-trained %.4f)", r.variant, gamma_tag(r.gamma),
                     r.pul_percent, r.u_fid, r.u_fid_pretrained)
        return path

    def gamma_sweep(self, gammas=None) -> list[EvalReport]:
        """One unlearn + evaluate per γ from the same θ*, stats and seeds; rows in input order."""
        gammas = self.cfg.eval.gammas if gammas is None else gammas
        if any(not 0 <= g <= 1 for g in gammas):
            raise ConfigError("gammas must lie in [0, 1]")
        stats = load_stats(self.stats_path)
        reports, panels = [], [("pretrained", self.theta_star)]
        for g in gammas:
            # score the stored model so a later eval from disk agrees exactly
            _, path = self.run_unlearn(g, stats)
            theta_u = load_checkpoint(path).params
            reports.append(self.evaluate(theta_u, gamma=g))
            panels.append((f"vdu_g{gamma_tag(g)}", theta_u))
            r = reports[-1]
            log.info("γ=%s: PUL %.1f, u-FID %.4f", gamma_tag(g), r.pul_percent, r.u_fid)
        write_reports_csv(self.out / "sweep.csv", reports)
        self._plot("sweep", panels)
        return reports

    def run_sweep(self) -> Path:
        self.gamma_sweep()
        return self.out / "sweep.csv"

    def robustness(self, gamma: float, variants=(("multi_run", 2), ("multi_run", 3), ("multi_run", 4),
                                                 ("single_run", 4))) -> list[EvalReport]:
        """Repeat one γ with statistics from different checkpoint sets."""
        reports = []
        for mode, n in variants:
            name = f"{mode}{n}"
            stats = self.compute_stats(mode, n)
            save_stats(self.out / f"stats_{name}.vdus", stats)
            _, path = self.run_unlearn(gamma, stats, variant=name)
            reports.append(self.evaluate(load_checkpoint(path).params, gamma=gamma, variant=name))
        write_reports_csv(self.out / "robustness.csv", reports)
        return reports


def best_mid_gamma(reports: list[EvalReport], fid_ratio: float = 3.0) -> EvalReport:
    """Best run among 0 < γ < 1.

    Runs meeting u-FID ≤ fid_ratio × pre-trained are preferred; within the
    preferred group the highest PUL wins, ties going to the smaller u-FID.
    """
    mids = [r for r in reports if 0 < r.gamma < 1]
    if not mids:
        raise ValueError("no intermediate γ in the reports")
    ok = [r for r in mids if r.u_fid <= fid_ratio * r.u_fid_pretrained]
    return max(ok or mids, key=lambda r: (r.pul_percent, -r.u_fid))
