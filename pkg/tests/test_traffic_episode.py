import itertools
import math

import numpy as np
import pytest

from gnnaim.config import SimConfig
from gnnaim.geometry import build_layout
from gnnaim.harness.episode import (
    Episode,
    MetricsRecord,
    SafetyViolation,
    ScenarioConfig,
    VehicleRecord,
    duration_of,
    run_episode,
    stopped,
)
from gnnaim.harness.traffic import Spawner, spawn_stream


def test_spawn_stream_mean_monte_carlo():
    rate = 0.3
    rng = np.random.default_rng(0)
    times = np.fromiter(itertools.islice(spawn_stream(rate, rng, t_shift=1.0), 100_000), float)
    gaps = np.diff(np.r_[0.0, times])
    assert abs(gaps.mean() - 1 / rate) / (1 / rate) < 0.01
    assert gaps.min() >= 1.0


def test_side_lane_rate_is_halved():
    lay = build_layout("M")
    sp = Spawner(lay, SimConfig(), 0.2, seed=0)
    rates = {q.lane: q.rate for q in sp.queues}
    assert rates["W_in"] == pytest.approx(0.2)
    assert rates["S_in"] == pytest.approx(0.1)  # mean inter-arrival 10 s


def test_left_turn_lane_rate_is_halved():
    sp = Spawner(build_layout("L"), SimConfig(), 0.2, seed=0)
    rates = {q.lane: q.rate for q in sp.queues}
    assert rates["W_in_left"] == pytest.approx(0.1)


def test_spawner_lane_arrivals_monte_carlo():
    """Scheduled arrivals of one lane follow the shifted exponential with the lane rate."""
    sp = Spawner(build_layout("M"), SimConfig(), 0.25, seed=3)
    q = next(q for q in sp.queues if q.lane == "W_in")
    t, gaps = 0.0, []
    for _ in range(100_000):
        nt = sp._draw(q, t)
        gaps.append(nt - t)
        t = nt
    assert abs(np.mean(gaps) - 4.0) / 4.0 < 0.01


def test_rate_above_shift_limit_rejected():
    with pytest.raises(ValueError):
        next(spawn_stream(2.0, np.random.default_rng(0), t_shift=1.0))


def test_scenario_validation():
    with pytest.raises(ValueError):
        ScenarioConfig(controller="nope")
    with pytest.raises(ValueError):
        ScenarioConfig(duration=0)
    with pytest.raises(ValueError):
        Episode(ScenarioConfig(controller="rl"))


def test_zero_demand_episode():
    m = run_episode(ScenarioConfig("L", "tl", 0.0, 30.0, 0))
    assert m.spawned == 0 and m.flow_rate == 0.0 and m.collisions == 0


def test_single_vehicle_free_flow_duration():
    """One vehicle on a free corridor: spawn at v0 and drive the route length at v0."""
    cfg = ScenarioConfig("M", "cf", 0.05, 40.0, 0)
    ep = Episode(cfg)
    rid = "W_in:through"
    from gnnaim.dynamics import VehicleState

    ep.spawner.queues = []  # manual spawn only
    ep.world.add(VehicleState(0, rid, 0.0, ep.config.sim.cf.v0))
    ep.records[0] = VehicleRecord(0, rid, 0.0, ep.config.sim.cf.v0)
    ep.spawner.spawned = 1
    m = ep.run()
    length = ep.layout.routes[rid].length
    assert m.completed == 1
    # first step at which the front of the route is reached
    assert m.durations[0] == pytest.approx(math.ceil(length / ep.config.sim.cf.v0 / 0.1 - 1e-9) * 0.1, abs=1e-9)


def test_free_flow_from_standing_start_matches_kinematics():
    """Starting at rest, IDM accelerates; duration >= length/v0 and within the time lost to reach v0 at a."""
    from gnnaim.dynamics import VehicleState

    ep = Episode(ScenarioConfig("M", "cf", 0.05, 40.0, 0))
    ep.spawner.queues = []
    rid = "S_in:left"
    ep.world.add(VehicleState(0, rid, 0.0, 0.0))
    ep.records[0] = VehicleRecord(0, rid, 0.0, 0.0)
    ep.spawner.spawned = 1
    m = ep.run()
    p = ep.config.sim.cf
    length = ep.layout.routes[rid].length
    lower = length / p.v0 + p.v0 / (2 * p.a)  # constant accel a to v0 then cruise
    assert lower <= m.durations[0] <= lower + 4.0


def test_duration_of():
    assert duration_of(VehicleRecord(1, "r", 5.0, 1.0, end_time=17.0)) == 12.0
    assert duration_of(VehicleRecord(1, "r", 5.0, 1.0)) is None
    assert duration_of(VehicleRecord(1, "r", 5.0, 1.0, end_time=9.0, collided=True)) is None


def test_stopped():
    assert stopped([5.0, 0.2, 4.0])
    assert not stopped([5.0, 0.31, 4.0])


def test_episode_determinism():
    a = run_episode(ScenarioConfig("L", "efifo", 0.25, 60.0, 11))
    b = run_episode(ScenarioConfig("L", "efifo", 0.25, 60.0, 11))
    assert a == b


@pytest.mark.parametrize("controller", ["tl", "fifo", "efifo", "pr", "cf"])
def test_conservation(controller):
    m = run_episode(ScenarioConfig("L", controller, 0.3, 60.0, 5))
    assert m.spawned == m.completed + m.active_at_end + m.collided_vehicles
    assert m.completed <= m.spawned
    assert m.flow_rate == pytest.approx(m.completed / m.duration)


def test_strict_controller_raises_on_collision():
    ep = Episode(ScenarioConfig("M", "cf", 0.3, 100.0, 1), strict=True)
    with pytest.raises(SafetyViolation):
        ep.run()


def test_metrics_record_properties():
    m = MetricsRecord("x", "L", "tl", 0.1, 0, 100.0, 0.02, [10.0, 14.0], [True, False], 0, 0, 2, 2, 0)
    assert m.median_duration == 12.0 and m.stop_fraction == 0.5 and m.collision_fraction == 0.0
