"""Longitudinal vehicle motion along fixed routes and footprint collision tests.

Lateral motion is pinned to the route, so the kinematic bicycle model reduces
to exact constant-acceleration integration of arc length; poses come from the
route parameterisation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .config import VehicleLimits


@dataclass(frozen=True, slots=True)
class VehicleState:
    id: int
    route: str
    s: float
    v: float
    accel: float = 0.0
    spawn_time: float = 0.0
    length: float = 5.0
    width: float = 2.0

    @property
    def front(self) -> float:
        return self.s + 0.5 * self.length

    @property
    def rear(self) -> float:
        return self.s - 0.5 * self.length


def step_vehicle(
    state: VehicleState,
    a: float,
    dt: float,
    limits: VehicleLimits = VehicleLimits(),
    s_max: float = math.inf,
) -> VehicleState:
    """Advance one vehicle by ``dt`` under commanded acceleration ``a``.

    Speed saturates at 0 and ``limits.v_max`` inside the step (no reversing);
    the stored acceleration is the mean acceleration actually realised.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    a = min(max(a, limits.a_min), limits.a_max)
    v = state.v
    v_end = v + a * dt
    if v_end < 0.0:
        # stops within the step, then stands still
        ds = v * v / (-2.0 * a) if a < 0 else 0.0
        v_end = 0.0
    elif v_end > limits.v_max:
        if v >= limits.v_max or a <= 0:
            ds = limits.v_max * dt
        else:
            tau = (limits.v_max - v) / a
            ds = v * tau + 0.5 * a * tau * tau + limits.v_max * (dt - tau)
        v_end = limits.v_max
    else:
        ds = v * dt + 0.5 * a * dt * dt
    return replace(state, s=min(state.s + ds, s_max), v=v_end, accel=(v_end - v) / dt)


def footprint(x: float, y: float, heading: float, length: float, width: float) -> np.ndarray:
    """Corners of the oriented rectangle centred at (x, y), counter-clockwise."""
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


def rectangles_overlap(ca: np.ndarray, cb: np.ndarray) -> bool:
    """Separating-axis test for two convex quadrilaterals given by their corners."""
    for corners in (ca, cb):
        for i in range(2):
            edge = corners[i + 1] - corners[i]
            axis = np.array([-edge[1], edge[0]])
            pa = ca @ axis
            pb = cb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def poses_of(states, layout) -> np.ndarray:
    """(N, 3) array of x, y, heading for the given states."""
    out = np.empty((len(states), 3))
    for k, st in enumerate(states):
        out[k] = layout.routes[st.route].xyh(st.s)
    return out


def check_collisions(states, layout) -> set[tuple[int, int]]:
    """Id pairs (low, high) whose oriented footprints overlap."""
    states = list(states)
    n = len(states)
    if n < 2:
        return set()
    poses = poses_of(states, layout)
    radius = np.array([0.5 * math.hypot(st.length, st.width) for st in states])
    diff = poses[:, None, :2] - poses[None, :, :2]
    dist = np.hypot(diff[..., 0], diff[..., 1])
    near = dist <= radius[:, None] + radius[None, :]
    hits = set()
    ii, jj = np.nonzero(np.triu(near, 1))
    for i, j in zip(ii.tolist(), jj.tolist()):
        a, b = states[i], states[j]
        ca = footprint(*poses[i], a.length, a.width)
        cb = footprint(*poses[j], b.length, b.width)
        if rectangles_overlap(ca, cb):
            hits.add((min(a.id, b.id), max(a.id, b.id)))
    return hits
