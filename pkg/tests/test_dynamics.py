import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gnnaim.config import VehicleLimits
from gnnaim.dynamics import VehicleState, check_collisions, footprint, rectangles_overlap, step_vehicle
from gnnaim.geometry import build_layout

LIM = VehicleLimits()


def test_constant_acceleration_step():
    s = step_vehicle(VehicleState(0, "r", 10.0, 5.0), 2.0, 0.1, LIM)
    assert s.v == pytest.approx(5.2)
    assert s.s == pytest.approx(10.0 + 0.5 + 0.01)
    assert s.accel == pytest.approx(2.0)


def test_no_reversing_stop_inside_step():
    s = step_vehicle(VehicleState(0, "r", 0.0, 0.2), -5.0, 0.1, LIM)
    assert s.v == 0.0
    assert s.s == pytest.approx(0.2**2 / 10.0)


def test_speed_cap_inside_step():
    s = step_vehicle(VehicleState(0, "r", 0.0, 9.9), 3.0, 0.1, LIM)
    tau = 0.1 / 3.0
    assert s.v == LIM.v_max
    assert s.s == pytest.approx(9.9 * tau + 1.5 * tau * tau + 10.0 * (0.1 - tau))


def test_command_is_clamped():
    s = step_vehicle(VehicleState(0, "r", 0.0, 5.0), 100.0, 0.1, LIM)
    assert s.v == pytest.approx(5.0 + LIM.a_max * 0.1)


@given(st.floats(0, 10), st.floats(-10, 10), st.integers(1, 50))
def test_integration_matches_closed_form(v0, a, n):
    """Many small steps equal one exact piecewise-constant-acceleration trajectory."""
    dt = 0.1
    s = VehicleState(0, "r", 0.0, v0)
    for _ in range(n):
        s = step_vehicle(s, a, dt, LIM)
    a_c = min(max(a, LIM.a_min), LIM.a_max)
    T = n * dt
    if a_c < 0 and v0 + a_c * T < 0:
        exp_s, exp_v = v0 * v0 / (-2 * a_c), 0.0
    elif a_c > 0 and v0 + a_c * T > LIM.v_max:
        tau = (LIM.v_max - v0) / a_c
        exp_s, exp_v = v0 * tau + 0.5 * a_c * tau * tau + LIM.v_max * (T - tau), LIM.v_max
    else:
        exp_s, exp_v = v0 * T + 0.5 * a_c * T * T, v0 + a_c * T
    assert s.s == pytest.approx(exp_s, abs=1e-9)
    assert s.v == pytest.approx(exp_v, abs=1e-9)
    assert 0.0 <= s.v <= LIM.v_max


def _sampled_overlap(ca, cb, n=60):
    """Monte-Carlo style oracle: dense point grids of each rectangle tested for containment in the other."""

    def grid(c):
        u = np.linspace(0, 1, n)
        a, b = np.meshgrid(u, u)
        return c[1] + a.ravel()[:, None] * (c[0] - c[1]) + b.ravel()[:, None] * (c[2] - c[1])

    def contains(c, p):
        e1, e2 = c[0] - c[1], c[2] - c[1]
        d = p - c[1]
        x, y = d @ e1 / (e1 @ e1), d @ e2 / (e2 @ e2)
        return np.any((x > 0) & (x < 1) & (y > 0) & (y < 1))

    return contains(cb, grid(ca)) or contains(ca, grid(cb))


@settings(max_examples=200, deadline=None)
@given(
    st.floats(-6, 6),
    st.floats(-6, 6),
    st.floats(-math.pi, math.pi),
    st.floats(-math.pi, math.pi),
)
def test_separating_axis_agrees_with_sampling(x, y, h1, h2):
    ca = footprint(0.0, 0.0, h1, 5.0, 2.0)
    cb = footprint(x, y, h2, 5.0, 2.0)
    sat = rectangles_overlap(ca, cb)
    sampled = _sampled_overlap(ca, cb)
    if sampled:
        assert sat
    if not sat:
        assert not sampled


def test_check_collisions_pairs():
    lay = build_layout("M")
    a = VehicleState(1, "W_in:through", 80.0, 0.0)
    b = VehicleState(2, "W_in:through", 83.0, 0.0)
    c = VehicleState(3, "W_in:through", 95.0, 0.0)
    assert check_collisions([a, b, c], lay) == {(1, 2)}
    assert check_collisions([a], lay) == set()
