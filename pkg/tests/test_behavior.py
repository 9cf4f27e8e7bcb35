import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gnnaim.behavior import (
    FREE_ROAD,
    IDLE,
    STOP_BUFFER,
    LeaderView,
    car_following,
    cf_accel,
    equilibrium_gap,
    idm_accel,
    resolve_leader,
)
from gnnaim.config import CfParams, SimConfig, VehicleLimits
from gnnaim.dynamics import VehicleState, check_collisions, step_vehicle
from gnnaim.geometry import build_layout
from gnnaim.world import World

P = CfParams()
LIM = VehicleLimits()


def test_idm_free_road_from_rest():
    assert idm_accel(0.0, FREE_ROAD, P, LIM) == pytest.approx(P.a)


def test_idm_at_desired_speed_is_zero():
    assert idm_accel(P.v0, FREE_ROAD, P, LIM) == pytest.approx(0.0)


def test_idm_scalar_formula():
    v, gap, vl = 6.0, 15.0, 4.0
    s_star = P.s0 + v * P.T + v * (v - vl) / (2 * math.sqrt(P.a * P.b))
    expect = P.a * (1 - (v / P.v0) ** P.delta - (s_star / gap) ** 2)
    assert idm_accel(v, LeaderView(gap, vl), P, LIM) == pytest.approx(expect)


@given(st.floats(0.5, 9.5))
def test_equilibrium_gap_zero_acceleration(v):
    g = equilibrium_gap(v, P)
    assert idm_accel(v, LeaderView(g, v), P, LIM) == pytest.approx(0.0, abs=1e-9)


@given(st.floats(0, 10), st.floats(0.01, 200), st.floats(0, 10))
def test_accel_within_limits(v, gap, vl):
    a = car_following(v, LeaderView(gap, vl), P, LIM, IDLE)
    assert LIM.a_min <= a <= LIM.a_max


def _world(layout="M"):
    return World(build_layout(layout), SimConfig())


def test_yielding_vehicle_sees_stationary_obstacle():
    w = _world()
    r = w.layout.routes["S_in:through"]
    w.add(VehicleState(1, r.id, 50.0, 8.0))
    ego = w.vehicles[1]
    view = resolve_leader(ego, w, right_of_way=False)
    assert view.speed == 0.0 and view.source == "halt"
    assert view.gap == pytest.approx(r.halt_s - ego.front + P.s0 - STOP_BUFFER)
    assert resolve_leader(ego, w, right_of_way=True) == FREE_ROAD


def test_yielding_vehicle_stops_short_of_halt():
    w = _world()
    r = w.layout.routes["S_in:through"]
    w.add(VehicleState(1, r.id, 30.0, 10.0))
    for _ in range(300):
        a = cf_accel(w, 1, right_of_way=False)
        w.replace_all({1: step_vehicle(w.vehicles[1], a, 0.1, LIM)})
        w.t += 0.1
    st_ = w.vehicles[1]
    assert st_.v < 0.05
    assert r.halt_s - 1.5 < st_.front <= r.halt_s


def test_single_lane_stress_no_rear_end_collisions():
    """200 s on one lane: an erratic leader brakes and accelerates at random, followers use car-following."""
    w = _world()
    rid = "W_in:through"
    r = w.layout.routes[rid]
    rng = np.random.default_rng(0)
    dt = 0.1
    nid = 0
    lead_cmd, hold = 0.0, 0
    collisions = 0
    for _ in range(2000):
        # spawn whenever the entrance is free
        ids_by_s = sorted(w.vehicles, key=lambda v: w.vehicles[v].s)
        if not ids_by_s or w.vehicles[ids_by_s[0]].rear > 12.0:
            w.add(VehicleState(nid, rid, 0.0, 5.0, spawn_time=w.t))
            nid += 1
        first = max(w.vehicles, key=lambda v: w.vehicles[v].s)
        if hold <= 0:
            lead_cmd, hold = float(rng.uniform(LIM.a_min, LIM.a_max)), int(rng.integers(5, 40))
        hold -= 1
        acc = {vid: cf_accel(w, vid) for vid in w.vehicles}
        acc[first] = lead_cmd
        nxt = {}
        for vid, s in w.vehicles.items():
            n = step_vehicle(s, acc[vid], dt, LIM)
            if n.s < r.length - 3.0:
                nxt[vid] = n
        w.t += dt
        w.replace_all(nxt)
        collisions += len(check_collisions(w.vehicles.values(), w.layout))
    assert nid > 10
    assert collisions == 0
