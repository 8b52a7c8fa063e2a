import math

import numpy as np
import pytest

from vdulab import diffgraph as dg
from vdulab.denoiser import DenoiserArch, embed_time, forward, init_params, predict_noise, predict_noise_value


def test_param_count():
    arch = DenoiserArch(2, (128, 128), 32)
    assert arch.n_params == (34 * 128 + 128) + (128 * 128 + 128) + (128 * 2 + 2)
    assert DenoiserArch.from_dict(arch.to_dict()) == arch


def test_embed_hand_values():
    e = embed_time(1, 4, 10000.0)
    np.testing.assert_allclose(e, [math.sin(1), math.cos(1), math.sin(0.01), math.cos(0.01)], rtol=1e-15)


def test_embed_properties():
    np.testing.assert_array_equal(embed_time(5, 32), embed_time(5, 32))
    E = embed_time(np.arange(1, 101), 32)
    assert E.shape == (100, 32)
    assert np.all(np.abs(E) <= 1)
    assert len({row.tobytes() for row in E}) == 100


def test_embed_rejects():
    with pytest.raises(ValueError):
        embed_time(3, 5)
    with pytest.raises(ValueError):
        embed_time(0, 4)


def test_init_reproducible_and_seeded():
    arch = DenoiserArch(2, (16,), 8)
    np.testing.assert_array_equal(init_params(arch, 3), init_params(arch, 3))
    assert np.any(init_params(arch, 3) != init_params(arch, 4))
    assert init_params(arch, 0).shape == (arch.n_params,)


def test_init_hidden_std_matches_fan_in():
    arch = DenoiserArch(2, (128, 128), 32)
    p = init_params(arch, 0)
    off = 34 * 128 + 128
    w = p[off:off + 128 * 128]
    expected = 1 / math.sqrt(3 * 128)
    assert abs(w.std() - expected) / expected < 0.2


def test_zero_last_layer_gives_zero():
    arch = DenoiserArch(2, (8, 8), 4)
    p = init_params(arch, 0)
    p[-(8 * 2 + 2):] = 0
    out = predict_noise_value(arch, p, np.random.default_rng(0).standard_normal((5, 2)), 3)
    np.testing.assert_array_equal(out, np.zeros((5, 2)))


def test_one_hidden_unit_hand_forward():
    arch = DenoiserArch(1, (1,), 2)
    w, b1, W2, b2 = [0.2, -0.3, 0.4], 0.1, 1.5, -0.2
    p = np.array(w + [b1, W2, b2])
    x, t = 0.5, 1
    z = 0.5 * 0.2 + math.sin(1) * -0.3 + math.cos(1) * 0.4 + 0.1
    expected = z / (1 + math.exp(-z)) * 1.5 - 0.2
    assert predict_noise_value(arch, p, np.array([x]), t)[0] == pytest.approx(expected, rel=1e-14)


def test_deterministic_and_pure():
    arch = DenoiserArch(2, (16, 16), 8)
    p = init_params(arch, 1)
    before = p.copy()
    x = np.array([[0.3, -1.0]])
    a = predict_noise_value(arch, p, x, 7)
    b = predict_noise_value(arch, p, x, 7)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(p, before)


def test_dimension_errors():
    arch = DenoiserArch(2, (8,), 4)
    p = init_params(arch, 0)
    with pytest.raises(ValueError):
        predict_noise(arch, p, np.zeros((3, 3)), 1)
    with pytest.raises(ValueError):
        predict_noise(arch, p[:-1], np.zeros((3, 2)), 1)
    with pytest.raises(ValueError):
        predict_noise(arch, p, np.zeros((3, 2)), 11, T=10)
    with pytest.raises(ValueError):
        forward(arch, p, np.zeros((3, 2)), np.zeros((2, 4)))


def test_noise_error_gradient_finite_differences():
    arch = DenoiserArch(2, (6, 5), 4)
    rng = np.random.default_rng(2)
    p = init_params(arch, 5)
    x = rng.standard_normal((3, 2))
    eps0 = rng.standard_normal((3, 2))
    t = np.array([1, 4, 9])

    def loss(q):
        return dg.total(dg.row_sq_norm(dg.sub(eps0, predict_noise(arch, q, x, t))))

    _, g = dg.value_and_grad(loss, p)
    h = 1e-5
    fd = np.empty_like(p)
    for i in range(p.size):
        e = np.zeros_like(p)
        e[i] = h
        fd[i] = (dg.evaluate(loss, p + e) - dg.evaluate(loss, p - e)) / (2 * h)
    big = np.abs(g) > 1e-8
    assert np.max(np.abs(g[big] - fd[big]) / np.abs(g[big])) < 1e-5
    assert np.all(np.abs(g[~big] - fd[~big]) < 1e-8)


def test_lipschitz_smoke():
    arch = DenoiserArch(2)
    p = init_params(arch, 0)
    x = np.random.default_rng(0).uniform(-3, 3, (50, 2))
    a = predict_noise_value(arch, p, x, 10)
    b = predict_noise_value(arch, p, x + 1e-6, 10)
    assert np.max(np.abs(a - b)) < 1e-2
