"""Graph observation of the traffic scene.

One vertex per vehicle inside the control zone.  Vehicles on crossing routes
that both still have the shared conflict area ahead are joined by a pair of
``crossing`` edges; a vehicle and its immediate follower on the same path are
joined by one ``same_lane`` edge pointing from the leader to the follower.
Edge features describe the source vehicle as seen from the destination
vehicle: inverse elliptical distance and relative bearing.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np

from .geometry import Pose, wrap_angle

log = logging.getLogger(__name__)


class EdgeType(IntEnum):
    same_lane = 0
    crossing = 1


@dataclass(frozen=True)
class SceneGraph:
    vertex_ids: tuple
    h: np.ndarray  # (N, 3): s, v, measured acceleration
    src: np.ndarray  # (E,) vertex indices
    dst: np.ndarray
    etype: np.ndarray
    g: np.ndarray  # (E, 2): inverse distance, bearing
    normalized: bool = False

    @property
    def n(self) -> int:
        return len(self.vertex_ids)

    @property
    def n_edges(self) -> int:
        return len(self.src)

    def edge_set(self) -> set:
        ids = self.vertex_ids
        return {(ids[s], ids[d], EdgeType(t).name) for s, d, t in zip(self.src.tolist(), self.dst.tolist(), self.etype.tolist())}

    def to_dict(self) -> dict:
        return {
            "vertices": [{"id": int(v), "h": self.h[k].tolist()} for k, v in enumerate(self.vertex_ids)],
            "edges": [
                {"src": int(self.vertex_ids[s]), "dst": int(self.vertex_ids[d]), "type": EdgeType(t).name, "g": self.g[k].tolist()}
                for k, (s, d, t) in enumerate(zip(self.src.tolist(), self.dst.tolist(), self.etype.tolist()))
            ],
            "normalized": self.normalized,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict())


def empty_graph() -> SceneGraph:
    z = np.zeros(0, dtype=np.int64)
    return SceneGraph((), np.zeros((0, 3)), z, z.copy(), z.copy(), np.zeros((0, 2)), True)


def bearing(i: Pose, j: Pose) -> float:
    """Direction of vehicle ``i`` seen from vehicle ``j``, relative to ``j``'s heading."""
    dx, dy = i.x - j.x, i.y - j.y
    if dx == 0.0 and dy == 0.0:
        log.warning("bearing between coincident positions; using 0")
        return 0.0
    return wrap_angle(math.atan2(dy, dx) - j.heading)


def pair_distance(i: Pose, j: Pose, sigma_lon: float = 10.0, sigma_lat: float = 2.0) -> float:
    """Elliptical (Mahalanobis) distance of ``i`` in the heading-aligned frame of ``j``."""
    dx, dy = i.x - j.x, i.y - j.y
    c, s = math.cos(j.heading), math.sin(j.heading)
    lon = c * dx + s * dy
    lat = -s * dx + c * dy
    return math.sqrt((lon / sigma_lon) ** 2 + (lat / sigma_lat) ** 2)


def build_graph(world, layout=None) -> SceneGraph:
    """Raw (unnormalised) graph of the vehicles inside the control zone."""
    layout = layout or world.layout
    cfg = world.cfg
    ids = tuple(sorted(vid for vid, st in world.vehicles.items() if st.s >= layout.routes[st.route].control_s))
    if not ids:
        return replace(empty_graph(), normalized=False)
    index = {vid: k for k, vid in enumerate(ids)}
    h = np.empty((len(ids), 3))
    poses = {}
    for k, vid in enumerate(ids):
        st = world.vehicles[vid]
        r = layout.routes[st.route]
        h[k] = (st.s - r.control_s, st.v, st.accel)
        poses[vid] = Pose(*r.xyh(st.s))

    edges = []
    for vid in ids:
        lead = world.leader(vid)
        if lead.id is not None and lead.id in index:
            edges.append((index[lead.id], index[vid], EdgeType.same_lane))
    for a in range(len(ids)):
        va = ids[a]
        sa = world.vehicles[va]
        for b in range(a + 1, len(ids)):
            vb = ids[b]
            sb = world.vehicles[vb]
            rel = layout.crossing(sa.route, sb.route)
            if rel is None:
                continue
            if sa.rear < rel.interval_a[1] and sb.rear < rel.interval_b[1]:
                edges.append((a, b, EdgeType.crossing))
                edges.append((b, a, EdgeType.crossing))

    src = np.array([e[0] for e in edges], dtype=np.int64)
    dst = np.array([e[1] for e in edges], dtype=np.int64)
    etype = np.array([int(e[2]) for e in edges], dtype=np.int64)
    g = np.empty((len(edges), 2))
    for k, (si, di, _) in enumerate(edges):
        pi, pj = poses[ids[si]], poses[ids[di]]
        d = pair_distance(pi, pj, cfg.sigma_lon, cfg.sigma_lat)
        g[k] = (1.0 / d if d > 0 else math.inf, bearing(pi, pj))
    return SceneGraph(ids, h, src, dst, etype, g, normalized=False)


def normalize_features(graph: SceneGraph, control_length: float = 50.0, v_max: float = 10.0, a_scale: float = 5.0, inv_dist_clip: float = 10.0) -> SceneGraph:
    if graph.normalized:
        return graph
    h = graph.h / np.array([control_length, v_max, a_scale])
    g = graph.g.copy()
    if len(g):
        g[:, 0] = np.clip(g[:, 0], 0.0, inv_dist_clip)
    return replace(graph, h=h, g=g, normalized=True)


def observe(world) -> SceneGraph:
    """Normalised graph observation used by the learned planner."""
    cfg = world.cfg
    return normalize_features(
        build_graph(world),
        control_length=world.layout.control_length,
        v_max=cfg.limits.v_max,
        a_scale=cfg.limits.a_scale,
        inv_dist_clip=cfg.inv_dist_clip,
    )
