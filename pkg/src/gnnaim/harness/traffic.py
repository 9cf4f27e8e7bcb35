"""Vehicle arrivals: shifted-exponential inter-arrival times per inbound lane."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..behavior import LeaderView, idm_accel
from ..dynamics import VehicleState


def spawn_stream(rate: float, rng: np.random.Generator, t_shift: float = 1.0, horizon: float = math.inf):
    """Yield arrival times of a shifted-exponential renewal process with mean rate ``rate``.

    Inter-arrival times are ``t_shift + Exp(1/rate - t_shift)``, so the mean
    gap is ``1/rate`` and no two arrivals are closer than ``t_shift``.
    """
    if rate <= 0:
        return
    mean_extra = 1.0 / rate - t_shift
    if mean_extra < 0:
        raise ValueError(f"rate {rate} exceeds the maximum 1/t_shift = {1.0 / t_shift}")
    t = 0.0
    while True:
        t += t_shift + rng.exponential(mean_extra)
        if t >= horizon:
            return
        yield t


@dataclass
class _LaneQueue:
    lane: str
    routes: tuple
    weights: np.ndarray
    rate: float
    rng: np.random.Generator
    next_time: float = math.inf
    backlog: list = field(default_factory=list)  # route ids waiting for space


class Spawner:
    """Injects vehicles at the start of each inbound lane.

    Arrivals that find the lane entrance occupied (or the vehicle cap reached)
    wait in a per-lane backlog and enter as soon as there is room.
    """

    def __init__(self, layout, cfg, demand: float, seed: int, cap: int | None = None):
        self.layout = layout
        self.cfg = cfg
        self.cap = cap
        self.next_id = 0
        self.spawned = 0
        root = np.random.SeedSequence(seed)
        children = root.spawn(len(layout.lanes))
        self.queues = []
        for child, lane in zip(children, sorted(layout.lanes)):
            info = layout.lanes[lane]
            rate = demand * info.demand
            routes = tuple(info.routes)
            w = np.array([cfg.turn_weights[layout.routes[r].turn] for r in routes], dtype=float)
            q = _LaneQueue(lane, routes, w / w.sum(), rate, np.random.default_rng(child))
            q.next_time = self._draw(q, 0.0)
            self.queues.append(q)

    def _draw(self, q: _LaneQueue, t: float) -> float:
        if q.rate <= 0:
            return math.inf
        extra = 1.0 / q.rate - self.cfg.spawn_shift
        if extra < 0:
            raise ValueError(f"lane rate {q.rate} exceeds 1/spawn_shift")
        return t + self.cfg.spawn_shift + q.rng.exponential(extra)

    def step(self, world) -> list[int]:
        """Spawn everything due at ``world.t``; returns the new vehicle ids."""
        new = []
        for q in self.queues:
            while q.next_time <= world.t + 1e-9:
                q.backlog.append(q.routes[q.rng.choice(len(q.routes), p=q.weights)])
                q.next_time = self._draw(q, q.next_time)
            if not q.backlog:
                continue
            if self.cap is not None and len(world.vehicles) >= self.cap:
                continue
            v = self._entry_speed(world, q.lane)
            if v is None:
                continue
            route = q.backlog.pop(0)
            lim = self.cfg.limits
            st = VehicleState(self.next_id, route, 0.0, v, 0.0, world.t, lim.length, lim.width)
            world.add(st)
            new.append(self.next_id)
            self.next_id += 1
            self.spawned += 1
        return new

    def _entry_speed(self, world, lane: str) -> float | None:
        """Highest entry speed that needs at most comfortable braking, or None if blocked."""
        cf = self.cfg.cf
        occupants = world.on_piece(lane)
        v0 = min(cf.v0, self.cfg.limits.v_max)
        if not occupants:
            return v0
        pos, oid = occupants[0]
        other = world.vehicles[oid]
        gap = pos - 0.5 * (other.length + self.cfg.limits.length)
        if gap < cf.s0:
            return None
        view = LeaderView(gap, other.v)
        best = 0.0
        for v in np.linspace(0.0, v0, 21):
            if idm_accel(float(v), view, cf, self.cfg.limits) >= -cf.b:
                best = float(v)
        return best
