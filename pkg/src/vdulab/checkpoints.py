"""Checkpoint container and parameter-posterior statistics.

File layout (little-endian)::

    magic      4 bytes   b"VDU1" (checkpoint) or b"VDUS" (stats)
    hlen       u32       header length in bytes
    header     hlen      UTF-8 "key=value" lines, keys sorted, '\\n'-terminated
    count      u64       number of payload values
    payload    count * 4 (float32) or count * 8 (float64), per header "dtype"
    crc        u32       CRC32 of the payload bytes

Checkpoints always store float32. Stats store mu_star followed by sigma_star
as float64.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .denoiser import DenoiserArch

CHECKPOINT_MAGIC = b"VDU1"
STATS_MAGIC = b"VDUS"
FORMAT_VERSION = 1
_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


class CheckpointError(Exception):
    pass


class ChecksumError(CheckpointError):
    pass


class ArchMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    arch: DenoiserArch
    schedule: dict
    params: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.arch.n_params,):
            raise CheckpointError(
                f"parameter vector has {self.params.size} entries, arch needs {self.arch.n_params}")


@dataclass
class ParamPosteriorStats:
    mu_star: np.ndarray
    sigma_star: np.ndarray
    n_checkpoints: int
    mode: str
    sigma_floor: float
    arch: DenoiserArch | None = None

    def __post_init__(self):
        if self.mu_star.shape != self.sigma_star.shape:
            raise ValueError("mu_star and sigma_star differ in length")
        if self.mode not in ("multi_run", "single_run"):
            raise ValueError(f"unknown stats mode {self.mode!r}")

    @property
    def d(self) -> int:
        return self.mu_star.size


# -- header text -----------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _encode_header(fields: dict) -> bytes:
    lines = []
    for k in sorted(fields):
        v = _fmt(fields[k])
        if "\n" in v or "=" in k:
            raise CheckpointError(f"header entry {k!r} cannot be encoded")
        lines.append(f"{k}={v}\n")
    return "".join(lines).encode("utf-8")


def _decode_header(raw: bytes) -> dict:
    out = {}
    for line in raw.decode("utf-8").splitlines():
        k, sep, v = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed header line {line!r}")
        out[k] = v
    return out


def _arch_fields(arch: DenoiserArch) -> dict:
    return {f"arch.{k}": v for k, v in arch.to_dict().items()}


def _arch_from_header(h: dict) -> DenoiserArch:
    return DenoiserArch(
        int(h["arch.input_dim"]),
        tuple(int(x) for x in h["arch.hidden_dims"].split(",")),
        int(h["arch.embed_dim"]),
        h["arch.activation"],
        float(h["arch.max_period"]),
    )


def _coerce(v: str):
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v


# -- container ---------------------------------------------------------------

def _write_container(path, magic: bytes, header: dict, payload: np.ndarray, dtype: str) -> None:
    header = dict(header, format_version=FORMAT_VERSION, dtype=dtype)
    hbytes = _encode_header(header)
    body = np.ascontiguousarray(payload, dtype=_DTYPES[dtype]).tobytes()
    blob = b"".join([
        magic,
        struct.pack("<I", len(hbytes)),
        hbytes,
        struct.pack("<Q", payload.size),
        body,
        struct.pack("<I", zlib.crc32(body)),
    ])
    Path(path).write_bytes(blob)


def _read_container(path, magic: bytes) -> tuple[dict, np.ndarray]:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise CheckpointError("truncated file: no header")
    if blob[:4] != magic:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {magic!r}")
    (hlen,) = struct.unpack_from("<I", blob, 4)
    pos = 8 + hlen
    if len(blob) < pos + 8:
        raise CheckpointError("truncated file: header")
    header = _decode_header(blob[8:pos])
    if int(header.get("format_version", -1)) != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {header.get('format_version')}")
    dtype = _DTYPES.get(header.get("dtype", ""))
    if dtype is None:
        raise CheckpointError(f"unknown payload dtype {header.get('dtype')!r}")
    (count,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    end = pos + count * dtype.itemsize
    if len(blob) < end + 4:
        raise CheckpointError("truncated file: payload")
    if len(blob) != end + 4:
        raise CheckpointError("trailing bytes after checksum")
    body = blob[pos:end]
    (crc,) = struct.unpack_from("<I", blob, end)
    if zlib.crc32(body) != crc:
        raise ChecksumError("payload checksum mismatch")
    return header, np.frombuffer(body, dtype=dtype).astype(np.float64)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header = {"kind": "checkpoint", "d": ckpt.arch.n_params, **_arch_fields(ckpt.arch)}
    header.update({f"schedule.{k}": v for k, v in ckpt.schedule.items()})
    header.update({f"meta.{k}": v for k, v in ckpt.meta.items()})
    _write_container(path, CHECKPOINT_MAGIC, header, ckpt.params, "float32")


def load_checkpoint(path, expected_arch: DenoiserArch | None = None) -> Checkpoint:
    header, values = _read_container(path, CHECKPOINT_MAGIC)
    arch = _arch_from_header(header)
    if expected_arch is not None and arch != expected_arch:
        raise ArchMismatchError(f"checkpoint arch {arch} differs from expected {expected_arch}")
    if int(header["d"]) != values.size or arch.n_params != values.size:
        raise CheckpointError(f"header declares d={header['d']} but payload has {values.size} values")
    schedule = {k[len("schedule."):]: _coerce(v) for k, v in header.items() if k.startswith("schedule.")}
    meta = {k[len("meta."):]: _coerce(v) for k, v in header.items() if k.startswith("meta.")}
    return Checkpoint(arch, schedule, values, meta)


def save_stats(path, stats: ParamPosteriorStats) -> None:
    header = {"kind": "stats", "d": stats.d, "mode": stats.mode,
              "n_checkpoints": stats.n_checkpoints, "sigma_floor": float(stats.sigma_floor)}
    if stats.arch is not None:
        header.update(_arch_fields(stats.arch))
    _write_container(path, STATS_MAGIC, header,
                     np.concatenate([stats.mu_star, stats.sigma_star]), "float64")


def load_stats(path) -> ParamPosteriorStats:
    header, values = _read_container(path, STATS_MAGIC)
    d = int(header["d"])
    if values.size != 2 * d:
        raise CheckpointError(f"stats payload has {values.size} values, expected {2 * d}")
    arch = _arch_from_header(header) if "arch.input_dim" in header else None
    return ParamPosteriorStats(values[:d].copy(), values[d:].copy(), int(header["n_checkpoints"]),
                               header["mode"], float(header["sigma_floor"]), arch)


# -- posterior statistics ----------------------------------------------------

def estimate_posterior_stats(checkpoints: list[Checkpoint], sigma_floor: float | None = None,
                             mode: str = "multi_run") -> ParamPosteriorStats:
    """Per-parameter sample mean and unbiased (n-1) standard deviation, floored.

    The default floor is 1e-4 times the RMS of the mean vector.
    """
    if len(checkpoints) < 2:
        raise ValueError("need at least two checkpoints")
    arch = checkpoints[0].arch
    for c in checkpoints[1:]:
        if c.arch != arch or c.params.size != checkpoints[0].params.size:
            raise ArchMismatchError("checkpoints disagree on architecture")
    theta = np.stack([c.params for c in checkpoints])
    mu = theta.mean(axis=0)
    sigma = theta.std(axis=0, ddof=1)
    if sigma_floor is None:
        sigma_floor = 1e-4 * float(np.sqrt(np.mean(mu * mu)))
    if not sigma_floor > 0:
        raise ValueError("sigma_floor must be positive")
    return ParamPosteriorStats(mu, np.maximum(sigma, sigma_floor), len(checkpoints), mode,
                               float(sigma_floor), arch)


def collect_single_run_checkpoints(training_driver: Callable[[int], list[Checkpoint]], k: int,
                                   spacing_epochs: int) -> list[Checkpoint]:
    """Last ``k`` snapshots of one training run, taken every ``spacing_epochs``.

    ``training_driver(spacing_epochs)`` runs (or replays) the training and
    returns its snapshots in epoch order, each with ``meta["epoch"]``.
    """
    if k < 2:
        raise ValueError("need k >= 2 checkpoints")
    snaps = training_driver(spacing_epochs)
    if len(snaps) < k:
        raise ValueError(f"run produced {len(snaps)} snapshots; shorter than k*spacing = {k * spacing_epochs} epochs")
    picked = snaps[-k:]
    epochs = [int(c.meta["epoch"]) for c in picked]
    if any(b <= a for a, b in zip(epochs, epochs[1:])):
        raise ValueError(f"snapshot epochs not increasing: {epochs}")
    return picked
