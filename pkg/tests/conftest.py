import numpy as np
import pytest

from vdulab.data import ring_mixture, sample_mixture, split_forget
from vdulab.denoiser import DenoiserArch
from vdulab.schedule import make_linear_schedule
from vdulab.training import pretrain


class SmallRing:
    """A quickly trained 2-D model, shared by the end-to-end unit tests."""

    def __init__(self):
        self.spec = ring_mixture(8, 4.0, 0.3)
        self.data = sample_mixture(self.spec, 1600, 11)
        self.D_f, self.D_r = split_forget(self.data, [3])
        self.schedule = make_linear_schedule(20, 5e-3, 0.5)
        self.arch = DenoiserArch(2, (32, 32), 8)
        ckpt, res = pretrain(self.schedule, self.arch, self.data.normalized(), epochs=30, lr=3e-3,
                             lr_final=1e-4, batch_size=128, seed=12, init_seed=0, snapshot_every=10)
        self.ckpt = ckpt
        self.result = res
        self.theta_star = ckpt.params


@pytest.fixture(scope="session")
def small_ring():
    return SmallRing()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
