import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gnnaim.config import SimConfig
from gnnaim.dynamics import VehicleState
from gnnaim.geometry import Pose, build_layout
from gnnaim.harness.episode import Episode, ScenarioConfig
from gnnaim.scenegraph import EdgeType, bearing, build_graph, normalize_features, observe, pair_distance
from gnnaim.world import World


def test_edge_types():
    assert [e.name for e in EdgeType] == ["same_lane", "crossing"]


def test_bearing_examples():
    assert bearing(Pose(10, 0, 0), Pose(0, 0, 0)) == pytest.approx(0.0)
    assert bearing(Pose(0, 5, 0), Pose(0, 0, 0)) == pytest.approx(math.pi / 2)
    assert bearing(Pose(0, 5, 0), Pose(0, 0, math.pi / 2)) == pytest.approx(0.0)
    assert bearing(Pose(-1, 0, 0), Pose(0, 0, 0)) == pytest.approx(math.pi)


def test_bearing_coincident_is_zero_with_warning(caplog):
    with caplog.at_level("WARNING"):
        assert bearing(Pose(1, 1, 0), Pose(1, 1, 2)) == 0.0
    assert "coincident" in caplog.text


def test_pair_distance_unit_ellipse():
    assert pair_distance(Pose(10, 0, 0), Pose(0, 0, 0)) == pytest.approx(1.0)
    assert pair_distance(Pose(0, 2, 0), Pose(0, 0, 0)) == pytest.approx(1.0)
    assert pair_distance(Pose(0, 10, 0), Pose(0, 0, math.pi / 2)) == pytest.approx(1.0)


@given(
    st.floats(-30, 30), st.floats(-30, 30), st.floats(-30, 30), st.floats(-30, 30), st.floats(-math.pi, math.pi)
)
def test_pair_distance_quadratic_form(xi, yi, xj, yj, hj):
    c, s = math.cos(hj), math.sin(hj)
    R = np.array([[c, -s], [s, c]])
    M = R @ np.diag([10.0**2, 2.0**2]) @ R.T
    dp = np.array([xi - xj, yi - yj])
    expect = math.sqrt(dp @ np.linalg.solve(M, dp))
    assert pair_distance(Pose(xi, yi, 0), Pose(xj, yj, hj)) == pytest.approx(expect, rel=1e-9, abs=1e-12)


def _world(kind, vehicles):
    w = World(build_layout(kind), SimConfig())
    for vid, rid, s in vehicles:
        w.add(VehicleState(vid, rid, s, 5.0))
    return w


def test_single_vehicle_graph():
    g = build_graph(_world("M", [(1, "W_in:through", 60.0)]))
    assert g.n == 1 and g.n_edges == 0


def test_vehicles_outside_control_zone_excluded():
    g = build_graph(_world("M", [(1, "W_in:through", 10.0), (2, "S_in:through", 60.0)]))
    assert g.vertex_ids == (2,)


def test_two_crossing_vehicles_bidirectional():
    g = build_graph(_world("M", [(1, "W_in:through", 60.0), (2, "S_in:through", 62.0)]))
    assert g.edge_set() == {(1, 2, "crossing"), (2, 1, "crossing")}


def test_crossing_edges_removed_once_one_side_cleared():
    lay = build_layout("M")
    rel = lay.crossing("W_in:through", "S_in:through")
    past = rel.interval_a[1] + 2.6  # rear beyond the interval end
    g = build_graph(_world("M", [(1, "W_in:through", past), (2, "S_in:through", 60.0)]))
    assert g.n_edges == 0


def test_same_lane_edge_points_to_follower_only():
    g = build_graph(_world("M", [(1, "W_in:through", 60.0), (2, "W_in:through", 50.0), (3, "W_in:through", 40.0)]))
    assert g.edge_set() == {(1, 2, "same_lane"), (2, 3, "same_lane")}


def test_reverse_edge_features_are_recomputed():
    g = build_graph(_world("M", [(1, "W_in:through", 66.0), (2, "S_in:through", 60.0)]))
    k12 = [k for k in range(g.n_edges) if (g.src[k], g.dst[k]) == (0, 1)][0]
    k21 = [k for k in range(g.n_edges) if (g.src[k], g.dst[k]) == (1, 0)][0]
    assert not np.allclose(g.g[k12], g.g[k21])
    lay = build_layout("M")
    p1 = Pose(*lay.routes["W_in:through"].xyh(66.0))
    p2 = Pose(*lay.routes["S_in:through"].xyh(60.0))
    assert g.g[k12, 0] == pytest.approx(1 / pair_distance(p1, p2))
    assert g.g[k12, 1] == pytest.approx(bearing(p1, p2))


def _path_position(lay, a: VehicleState, b: VehicleState):
    """Arc length of ``a`` along ``b``'s route if ``a`` currently occupies part of that route, else None."""
    ra, rb = lay.routes[a.route], lay.routes[b.route]
    piece, start_a = ra.piece_at(a.s)
    start_b = rb.piece_offset(piece)
    if start_b is not None:
        return a.s - start_a + start_b
    rel = lay.relation(a.route, b.route)
    if rel is not None and rel.kind == "same_lane_prefix" and b.s < rb.halt_s and a.rear < rel.interval_a[1]:
        return a.s
    return None


def brute_force_edges(world):
    """O(N^2) scan over all vehicle pairs."""
    lay = world.layout
    ids = [v for v, s in world.vehicles.items() if s.s >= lay.routes[s.route].control_s]
    edges = set()
    for b in ids:
        sb = world.vehicles[b]
        best = None
        for a in world.vehicles:
            if a == b:
                continue
            pos = _path_position(lay, world.vehicles[a], sb)
            if pos is not None and pos > sb.s and (best is None or pos < best[0]):
                best = (pos, a)
        if best is not None and best[1] in ids:
            edges.add((best[1], b, "same_lane"))
    for a in ids:
        for b in ids:
            if a == b:
                continue
            sa, sb = world.vehicles[a], world.vehicles[b]
            if lay.routes[sa.route].approach_lane == lay.routes[sb.route].approach_lane:
                continue
            rel = lay.crossing(sa.route, sb.route)
            if rel is not None and sa.rear < rel.interval_a[1] and sb.rear < rel.interval_b[1]:
                edges.add((a, b, "crossing"))
    return edges


@pytest.mark.parametrize("kind,controller", [("L", "tl"), ("XL", "efifo"), ("M", "pr"), ("S", "fifo")])
def test_edge_set_matches_brute_force(kind, controller):
    ep = Episode(ScenarioConfig(kind, controller, 0.25, 60.0, 3))
    rng = np.random.default_rng(0)
    sample = set(rng.choice(ep.n_steps, size=25, replace=False).tolist())
    checked = 0
    for k in range(ep.n_steps):
        ep.step()
        if k in sample:
            g = build_graph(ep.world)
            assert g.edge_set() == brute_force_edges(ep.world)
            assert np.all(np.isfinite(g.h)) and (g.n_edges == 0 or np.all(np.isfinite(g.g)))
            assert not np.any(g.src == g.dst)
            checked += g.n_edges
    assert checked > 0


def test_relabelling_permutes_graph():
    vehicles = [(1, "W_in:through", 60.0), (2, "S_in:through", 62.0), (3, "W_in:through", 52.0), (4, "E_in:left", 58.0)]
    g1 = build_graph(_world("M", vehicles))
    relabel = {1: 40, 2: 10, 3: 30, 4: 20}
    g2 = build_graph(_world("M", [(relabel[v], r, s) for v, r, s in vehicles]))
    mapped = {(relabel[a], relabel[b], t) for a, b, t in g1.edge_set()}
    assert mapped == g2.edge_set()
    for k, vid in enumerate(g1.vertex_ids):
        assert np.array_equal(g1.h[k], g2.h[g2.vertex_ids.index(relabel[vid])])


def test_normalisation():
    w = _world("M", [(1, "W_in:through", 60.0), (2, "S_in:through", 74.0)])
    raw = build_graph(w)
    norm = observe(w)
    assert norm.normalized and not raw.normalized
    assert np.allclose(norm.h[:, 0], raw.h[:, 0] / 50.0)
    assert np.allclose(norm.h[:, 1], raw.h[:, 1] / 10.0)
    assert np.all(norm.g[:, 0] <= w.cfg.inv_dist_clip)
    assert normalize_features(norm) is norm


def test_graph_dump_is_json():
    import json

    w = _world("M", [(1, "W_in:through", 60.0), (2, "S_in:through", 62.0)])
    d = json.loads(build_graph(w).dumps())
    assert {e["type"] for e in d["edges"]} == {"crossing"}
