import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vdulab.schedule import make_cosine_schedule, make_linear_schedule, schedule_from_params


def test_three_step_hand_values():
    s = make_linear_schedule(3, 0.1, 0.3)
    np.testing.assert_allclose(s.alpha, [0.9, 0.8, 0.7], rtol=1e-14)
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.72, 0.504], rtol=1e-14)
    assert s.posterior_var_at(2) == pytest.approx(0.2 * 0.1 / 0.28, rel=1e-13)
    assert s.posterior_var_at(2) == pytest.approx(0.0714286, abs=1e-7)
    assert s.loss_weight_at(2) == pytest.approx(2.5, rel=1e-13)
    assert s.posterior_var_at(3) == pytest.approx(0.3 * 0.28 / 0.496, rel=1e-13)
    assert s.loss_weight_at(3) == pytest.approx(0.3 / (0.7 * 0.28), rel=1e-13)


def test_constant_schedule():
    b = 0.05
    s = make_linear_schedule(2, b, b)
    np.testing.assert_array_equal(s.beta, [b, b])
    np.testing.assert_allclose(s.alpha_bar, [1 - b, (1 - b) ** 2], rtol=1e-15)


def test_mnist_style_schedule():
    s = make_linear_schedule(1000, 1e-4, 0.02)
    assert s.beta[0] == pytest.approx(1e-4)
    assert s.beta[-1] == pytest.approx(0.02)
    assert s.alpha_bar[-1] < 1e-4


def test_t1_entries_are_zero():
    s = make_linear_schedule(10, 1e-3, 0.2)
    assert s.posterior_var_at(1) == 0.0
    assert s.loss_weight_at(1) == 0.0


@pytest.mark.parametrize("args", [(1, 0.1, 0.2), (5, 0.0, 0.1), (5, 0.2, 0.1), (5, 0.1, 1.0)])
def test_linear_rejects_bad_args(args):
    with pytest.raises(ValueError):
        make_linear_schedule(*args)


def test_cosine_rejects_short():
    with pytest.raises(ValueError):
        make_cosine_schedule(1)


def test_cosine_small_cases():
    s = make_cosine_schedule(2)
    assert 0 < s.alpha_bar[1] < s.alpha_bar[0] < 1
    s = make_cosine_schedule(100)
    assert s.alpha_bar[99] < s.alpha_bar[0]


def test_cosine_matches_direct_formula():
    T, off = 100, 0.008

    def f(u):
        return math.cos((u + off) / (1 + off) * math.pi / 2) ** 2

    expected = []
    for i in range(T):
        b = 1 - f((i + 1) / T) / f(i / T)
        expected.append(min(b, 0.999))
    np.testing.assert_allclose(make_cosine_schedule(T).beta, expected, rtol=1e-14)
    assert max(expected) == 0.999


def test_out_of_range_t():
    s = make_linear_schedule(5, 0.01, 0.1)
    with pytest.raises(ValueError):
        s.alpha_bar_at(0)
    with pytest.raises(ValueError):
        s.alpha_at(6)


def test_deterministic_and_params_round_trip():
    a = make_linear_schedule(50, 1e-3, 0.2)
    b = schedule_from_params(a.params())
    assert a.beta.tobytes() == b.beta.tobytes()
    assert a.alpha_bar.tobytes() == b.alpha_bar.tobytes()
    c = make_cosine_schedule(30)
    assert schedule_from_params(c.params()).beta.tobytes() == c.beta.tobytes()


def test_immutable():
    s = make_linear_schedule(5, 0.01, 0.1)
    with pytest.raises(ValueError):
        s.alpha_bar[0] = 0.5


schedules = st.one_of(
    st.builds(lambda T, lo, span: make_linear_schedule(T, lo, min(lo + span, 0.999)),
              st.integers(2, 300), st.floats(1e-5, 0.1), st.floats(0.0, 0.5)),
    st.builds(make_cosine_schedule, st.integers(2, 300)),
)


@settings(max_examples=60, deadline=None)
@given(schedules)
def test_schedule_invariants(s):
    ab = s.alpha_bar
    assert np.all(np.diff(ab) < 0)
    assert np.all(ab > 0) and np.all(ab <= s.alpha[0]) and s.alpha[0] < 1
    pv, lw = s.posterior_var[1:], s.loss_weight[1:]
    # σ²_q is built from 1 - α, which can sit one ulp above beta; and the
    # inequality is strict only while 1 - ᾱ_{t-1} is distinguishable from 1
    beta = 1 - s.alpha[1:]
    np.testing.assert_allclose(beta, s.beta[1:], rtol=1e-10)
    assert np.all(pv <= beta)
    resolvable = ab[:-1] > 1e-15
    assert np.all(pv[resolvable] < beta[resolvable])
    assert np.all(np.isfinite(pv)) and np.all(pv > 0)
    assert np.all(np.isfinite(lw)) and np.all(lw > 0)
    a, ab_prev = s.alpha[1:], ab[:-1]
    lhs = pv * (1 - ab[1:])
    rhs = (1 - a) * (1 - ab_prev)
    assert np.max(np.abs(lhs - rhs) / rhs) < 1e-12
    lhs = lw * a * (1 - ab_prev)
    assert np.max(np.abs(lhs - (1 - a)) / (1 - a)) < 1e-12
