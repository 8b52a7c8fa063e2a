"""Acceptance criteria, each run at its stated tolerance.

Every test prints one ``[PASS]``/``[FAIL]`` line, then asserts. The desk-scale
experiment (criteria 3, 4, 5, 7) runs once per session from configs/default.yaml.
"""

import math
import struct
import time
import zlib
from pathlib import Path

import numpy as np
import pytest

from vdulab import diffgraph as dg
from vdulab.checkpoints import (Checkpoint, ChecksumError, ParamPosteriorStats, load_checkpoint,
                                save_checkpoint)
from vdulab.data import load_idx
from vdulab.denoiser import DenoiserArch, init_params
from vdulab.diffusion import (PosteriorParams, ddpm_train_loss, forward_noise, kl_posteriors,
                              posterior_mean_from_eps, true_posterior)
from vdulab.evaluate import EvalReport, read_reports_csv, write_reports_csv
from vdulab.experiment import Experiment, best_mid_gamma, load_config
from vdulab.schedule import make_linear_schedule
from vdulab.vdu import VduConfig, vdu_loss

DEFAULT_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "default.yaml"
FID_RATIO = 3.0


@pytest.fixture
def verdict(capsys):
    def report(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"
    return report


# -- 1. closed-form identities -----------------------------------------------------

def _grid_posterior(s, x_t, x0, t, n=400_001):
    a, ab_prev = s.alpha[t - 1], s.alpha_bar[t - 2]
    m, v = math.sqrt(ab_prev) * x0, 1 - ab_prev
    grid = np.linspace(m - 12 * math.sqrt(v), m + 12 * math.sqrt(v), n)
    logp = -(x_t - math.sqrt(a) * grid) ** 2 / (2 * (1 - a)) - (grid - m) ** 2 / (2 * v)
    w = np.exp(logp - logp.max())
    w /= w.sum()
    mean = np.sum(w * grid)
    return mean, np.sum(w * (grid - mean) ** 2)


def test_criterion_1_closed_form_identities(verdict):
    t0 = time.perf_counter()
    s = make_linear_schedule(10, 0.01, 0.3)
    rng = np.random.default_rng(0)
    grid_err, form_err, kl_err = 0.0, 0.0, 0.0
    for t in range(2, 11):
        for _ in range(3):
            x0 = rng.normal()
            x_t = forward_noise(s, np.array([x0]), t, rng.standard_normal(1))[0]
            m, v = _grid_posterior(s, x_t, x0, t)
            post = true_posterior(s, np.array([x_t]), np.array([x0]), t)
            grid_err = max(grid_err, abs(post.mean[0] - m), abs(post.var - v))
    for _ in range(200):
        t = int(rng.integers(2, 11))
        x0, eps, eps_hat = rng.standard_normal((3, 4))
        x_t = forward_noise(s, x0, t, eps)
        tp = true_posterior(s, x_t, x0, t)
        alt = posterior_mean_from_eps(s, x_t, eps, t)
        form_err = max(form_err, np.max(np.abs(tp.mean - alt) / np.maximum(np.abs(alt), 1e-300)))
        kl = kl_posteriors(s, tp, PosteriorParams(posterior_mean_from_eps(s, x_t, eps_hat, t), tp.var), t)
        a, ab_prev = s.alpha[t - 1], s.alpha_bar[t - 2]
        ident = (1 - a) / (2 * a * (1 - ab_prev)) * np.sum((eps - eps_hat) ** 2)
        kl_err = max(kl_err, abs(kl - ident) / ident)
    # forward marginal from repeated one-step noising, 1e5 chains
    n, x0 = 100_000, 1.5
    x = np.full(n, x0)
    worst_z = 0.0
    for t in range(1, 11):
        a = s.alpha[t - 1]
        x = math.sqrt(a) * x + math.sqrt(1 - a) * rng.standard_normal(n)
        ab = s.alpha_bar[t - 1]
        m, v = math.sqrt(ab) * x0, 1 - ab
        worst_z = max(worst_z, abs(x.mean() - m) / math.sqrt(v / n),
                      abs(x.var(ddof=1) - v) / (v * math.sqrt(2 / (n - 1))))
    elapsed = time.perf_counter() - t0
    ok = grid_err < 1e-4 and form_err < 1e-10 and kl_err < 1e-8 and worst_z < 4 and elapsed < 60
    verdict("C1 closed-form identities", ok,
            f"grid-Bayes {grid_err:.2e} (<1e-4), mean forms {form_err:.2e} (<1e-10), "
            f"KL identity {kl_err:.2e} (<1e-8), marginal max |z| {worst_z:.2f} (<4), {elapsed:.1f}s (<60s)")


# -- 2. gradients ----------------------------------------------------------------------

def _fd_rel_err(f, p, h=1e-6):
    _, g = dg.value_and_grad(f, p)
    fd = np.empty_like(p)
    for i in range(p.size):
        e = np.zeros_like(p)
        e[i] = h
        fd[i] = (dg.evaluate(f, p + e) - dg.evaluate(f, p - e)) / (2 * h)
    # entrywise relative error, with entries below 1e-3 of the largest measured against that level
    scale = np.maximum(np.abs(fd), 1e-3 * np.max(np.abs(fd)))
    return float(np.max(np.abs(g - fd) / scale))


def test_criterion_2_gradient_suite(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {"ddpm_train_loss": 0.0, "vdu_loss": 0.0}
    for _ in range(100):
        T = int(rng.integers(3, 21))
        lo = float(rng.uniform(1e-3, 0.05))
        s = make_linear_schedule(T, lo, float(rng.uniform(lo, 0.5)))
        dim = int(rng.integers(1, 4))
        arch = DenoiserArch(dim, (int(rng.integers(2, 6)), int(rng.integers(2, 6))), 4)
        p = init_params(arch, int(rng.integers(1 << 30)))
        x0 = rng.standard_normal((int(rng.integers(1, 6)), dim))
        seed = int(rng.integers(1 << 30))
        worst["ddpm_train_loss"] = max(worst["ddpm_train_loss"], _fd_rel_err(
            lambda q: ddpm_train_loss(s, arch, q, x0, np.random.default_rng(seed)), p))
        st = ParamPosteriorStats(p + 0.1 * rng.standard_normal(p.size), rng.uniform(0.1, 1.0, p.size),
                                 4, "multi_run", 1e-4)
        cfg = VduConfig(gamma=float(rng.uniform()), t_subsample=int(rng.integers(1, T)))
        worst["vdu_loss"] = max(worst["vdu_loss"], _fd_rel_err(
            lambda q: vdu_loss(s, arch, q, x0, st, cfg, np.random.default_rng(seed)), p))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 120
    verdict("C2 gradient suite", ok,
            f"100 instances, max rel err ddpm_train_loss {worst['ddpm_train_loss']:.2e}, "
            f"vdu_loss {worst['vdu_loss']:.2e} (<1e-4), {elapsed:.1f}s (<120s)")


# -- 3/4/5/7. desk-scale experiment ----------------------------------------------------

def _run_experiment(out_dir):
    cfg = load_config(DEFAULT_CONFIG, out_dir=out_dir)
    exp = Experiment(cfg)
    t0 = time.perf_counter()
    exp.run_pretrain()
    exp.run_stats()
    sweep = exp.gamma_sweep()
    return exp, sweep, time.perf_counter() - t0


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    exp, sweep, elapsed = _run_experiment(tmp_path_factory.mktemp("desk"))
    return {"exp": exp, "sweep": sweep, "elapsed": elapsed}


def _by_gamma(sweep, g):
    return next(r for r in sweep if r.gamma == g)


def _table(rows):
    return "; ".join(f"{r.variant} γ={r.gamma:g}: PUL {r.pul_percent:.1f}, u-FID {r.u_fid:.4f}" for r in rows)


def test_criterion_3_pretraining_quality(desk, verdict):
    import csv
    with open(desk["exp"].out / "pretrain.csv") as f:
        fids = [float(r["fid_heldout"]) for r in csv.DictReader(f)]
    ok = len(fids) == 4 and max(fids) < 0.5
    verdict("C3 pre-training", ok, f"{len(fids)} runs, Fréchet to held-out {[round(x, 4) for x in fids]} (<0.5)")


def test_criterion_3a_mid_gamma_unlearns_without_quality_loss(desk, verdict):
    sweep = desk["sweep"]
    mids = [r for r in sweep if r.gamma in (0.1, 0.3, 0.6, 0.8)]
    hits = [r for r in mids if r.pul_percent >= 60 and r.u_fid <= FID_RATIO * r.u_fid_pretrained]
    limit = FID_RATIO * sweep[0].u_fid_pretrained
    verdict("C3a mid-γ PUL ≥ 60 with u-FID ≤ 3× pre-trained", bool(hits),
            f"pre-trained u-FID {sweep[0].u_fid_pretrained:.4f}, limit {limit:.4f}; {_table(mids)}")


def test_criterion_3b_gamma_one_collapses(desk, verdict):
    r = _by_gamma(desk["sweep"], 1.0)
    verdict("C3b γ=1 PUL ≤ 25", r.pul_percent <= 25, f"PUL {r.pul_percent:.1f}")


def test_criterion_3c_gamma_zero_hurts_quality(desk, verdict):
    zero = _by_gamma(desk["sweep"], 0.0)
    best = best_mid_gamma(desk["sweep"], FID_RATIO)
    verdict("C3c γ=0 u-FID worse than best mid-γ", zero.u_fid > best.u_fid,
            f"γ=0 u-FID {zero.u_fid:.4f} vs best mid-γ (γ={best.gamma:g}) {best.u_fid:.4f}")


def test_criterion_3_runtime(desk, verdict):
    verdict("C3 runtime", desk["elapsed"] < 30 * 60, f"{desk['elapsed'] / 60:.1f} min (<30 min target)")


def test_criterion_4_finetune_dominates(desk, verdict):
    exp = desk["exp"]
    best = best_mid_gamma(desk["sweep"], FID_RATIO)
    ft = exp.evaluate(load_checkpoint(exp.run_finetune()).params, variant="finetune")
    ok = ft.pul_percent >= best.pul_percent and ft.u_fid <= best.u_fid
    verdict("C4 fine-tune on D_r dominates best VDU γ", ok,
            f"fine-tune PUL {ft.pul_percent:.1f}, u-FID {ft.u_fid:.4f}; "
            f"VDU γ={best.gamma:g} PUL {best.pul_percent:.1f}, u-FID {best.u_fid:.4f}")


def test_criterion_5_checkpoint_count_robustness(desk, verdict):
    exp = desk["exp"]
    best = best_mid_gamma(desk["sweep"], FID_RATIO)
    rows = exp.robustness(best.gamma)
    ok = all(r.pul_percent >= 60 and r.u_fid <= FID_RATIO * r.u_fid_pretrained for r in rows)
    verdict("C5 stats from 2/3/4 runs and 4 single-run snapshots meet C3a", ok, _table(rows))


def test_criterion_7_determinism(desk, tmp_path, verdict):
    first = desk["exp"].out
    exp2, _, _ = _run_experiment(tmp_path)
    names = sorted(p.name for p in first.glob("*.csv"))
    # criterion-3 outputs only; later criteria add files to the first directory
    names = [n for n in names if (tmp_path / n).exists()]
    same = [n for n in names if (first / n).read_bytes() == (tmp_path / n).read_bytes()]
    ckpts = sorted(p.name for p in (tmp_path / "checkpoints").glob("*.vdu"))
    same_ck = all((first / "checkpoints" / n).read_bytes() == (tmp_path / "checkpoints" / n).read_bytes()
                  for n in ckpts)
    ok = len(names) >= 10 and same == names and same_ck
    verdict("C7 determinism", ok, f"{len(same)}/{len(names)} CSV files and {len(ckpts)} checkpoints byte-identical")


# -- 6. formats ----------------------------------------------------------------------------

def test_criterion_6_format_round_trips(tmp_path, verdict):
    t0 = time.perf_counter()
    arch = DenoiserArch(2, (128, 128), 32)
    p = init_params(arch, 0).astype(np.float32).astype(np.float64)
    ck = Checkpoint(arch, make_linear_schedule(100, 1e-3, 0.2).params(), p, {"seed": 100, "epoch": 200})
    save_checkpoint(tmp_path / "a.vdu", ck)
    back = load_checkpoint(tmp_path / "a.vdu", expected_arch=arch)
    save_checkpoint(tmp_path / "b.vdu", back)
    ck_ok = back.params.tobytes() == p.tobytes() and \
        (tmp_path / "a.vdu").read_bytes() == (tmp_path / "b.vdu").read_bytes()

    blob = bytearray((tmp_path / "a.vdu").read_bytes())
    blob[-100] ^= 0x40
    (tmp_path / "c.vdu").write_bytes(bytes(blob))
    try:
        load_checkpoint(tmp_path / "c.vdu")
        crc_ok = False
    except ChecksumError:
        crc_ok = True

    img = struct.pack(">IIII", 0x803, 2, 2, 2) + bytes([0, 255, 51, 204, 1, 2, 3, 4])
    (tmp_path / "i").write_bytes(img)
    (tmp_path / "l").write_bytes(struct.pack(">II", 0x801, 2) + bytes([5, 9]))
    d = load_idx(tmp_path / "i", tmp_path / "l")
    idx_ok = np.array_equal(d.points, np.array([[0, 255, 51, 204], [1, 2, 3, 4]]) / 127.5 - 1.0) \
        and d.points[0, 0] == -1.0 and d.points[0, 1] == 1.0 and list(d.labels) == [5, 9]

    reports = [EvalReport("vdu", g, 2000, 250, 100 + i, 0.1 * i + 1 / 3, 0.1 ** i, 0.0082, 7, 3)
               for i, g in enumerate([0.0, 0.1, 0.3, 0.6, 0.8, 1.0])]
    write_reports_csv(tmp_path / "r.csv", reports)
    csv_ok = read_reports_csv(tmp_path / "r.csv") == reports
    write_reports_csv(tmp_path / "r2.csv", read_reports_csv(tmp_path / "r.csv"))
    csv_ok = csv_ok and (tmp_path / "r.csv").read_bytes() == (tmp_path / "r2.csv").read_bytes()
    crc = zlib.crc32(np.asarray(p, dtype="<f4").tobytes())
    crc_ok = crc_ok and struct.unpack("<I", (tmp_path / "a.vdu").read_bytes()[-4:])[0] == crc
    elapsed = time.perf_counter() - t0
    ok = ck_ok and crc_ok and idx_ok and csv_ok and elapsed < 10
    verdict("C6 format round trips", ok, f"checkpoint {ck_ok}, CRC {crc_ok}, IDX {idx_ok}, CSV {csv_ok}, "
                                         f"{elapsed:.2f}s (<10s)")
