"""Mutable simulation world: the vehicles currently on a layout plus bookkeeping.

Controllers, the scene-graph builder and the metrics all read from one World;
only the episode loop mutates it.
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass

from .config import SimConfig
from .dynamics import VehicleState
from .geometry import IntersectionLayout, Route


@dataclass(frozen=True)
class Leader:
    id: int | None
    gap: float
    speed: float


NO_LEADER = Leader(None, math.inf, 0.0)


class World:
    def __init__(self, layout: IntersectionLayout, cfg: SimConfig | None = None):
        self.layout = layout
        self.cfg = cfg or SimConfig()
        self.t = 0.0
        self.step_index = 0
        self.vehicles: dict[int, VehicleState] = {}
        # (time, sequence) of first entry into the control zone
        self.arrival: dict[int, tuple[float, int]] = {}
        self.drive_off: dict = {}
        self.events: list[dict] = []
        self._seq = 0
        self._index = None

    # -- population -------------------------------------------------------
    def add(self, state: VehicleState) -> None:
        if state.id in self.vehicles:
            raise ValueError(f"duplicate vehicle id {state.id}")
        self.vehicles[state.id] = state
        self._stamp(state)
        self._index = None

    def remove(self, vid: int) -> VehicleState:
        self.arrival.pop(vid, None)
        self.drive_off.pop(vid, None)
        self._index = None
        return self.vehicles.pop(vid)

    def replace_all(self, states: dict[int, VehicleState]) -> None:
        self.vehicles = states
        for st in states.values():
            self._stamp(st)
        self._index = None

    def _stamp(self, st: VehicleState) -> None:
        if st.id not in self.arrival and st.s >= self.layout.routes[st.route].control_s:
            self.arrival[st.id] = (self.t, self._seq)
            self._seq += 1

    def log(self, kind: str, **info) -> None:
        self.events.append({"t": round(self.t, 6), "kind": kind, **info})

    # -- queries ----------------------------------------------------------
    def route(self, vid: int) -> Route:
        return self.layout.routes[self.vehicles[vid].route]

    def in_control_zone(self, vid: int) -> bool:
        st = self.vehicles[vid]
        return st.s >= self.layout.routes[st.route].control_s

    def controlled_ids(self) -> list[int]:
        return [vid for vid in self.vehicles if self.in_control_zone(vid)]

    def _build_index(self):
        pieces: dict[str, list] = {}
        diverged: dict[str, list] = {}
        for vid, st in self.vehicles.items():
            r = self.layout.routes[st.route]
            piece, start = r.piece_at(st.s)
            pieces.setdefault(piece, []).append((st.s - start, vid))
            if piece == r.id:
                diverged.setdefault(r.approach_lane, []).append(vid)
        for lst in pieces.values():
            lst.sort()
        self._index = (pieces, diverged)
        return self._index

    def on_piece(self, piece: str) -> list[tuple[float, int]]:
        """Vehicles on a lane piece as sorted (local arc length, id) pairs."""
        pieces, _ = self._index or self._build_index()
        return pieces.get(piece, [])

    def leader(self, vid: int) -> Leader:
        """Nearest vehicle ahead on the ego's path.

        Besides vehicles on the ego's own lane pieces this includes vehicles
        that left the shared inbound lane onto another connector but have not
        yet separated from the ego's path.
        """
        pieces, diverged = self._index or self._build_index()
        ego = self.vehicles[vid]
        r = self.layout.routes[ego.route]
        best_pos, best_id = math.inf, None
        found = False
        for piece, start, _ in r.pieces:
            if ego.s >= _piece_end(r, piece):
                continue
            lst = pieces.get(piece)
            if not lst:
                continue
            local = ego.s - start
            k = bisect.bisect_right(lst, (local, vid))
            while k < len(lst):
                pos, oid = lst[k]
                if oid != vid and pos + start > ego.s:
                    best_pos, best_id = pos + start, oid
                    found = True
                    break
                k += 1
            if found:
                break
        if ego.s < r.halt_s:
            for oid in diverged.get(r.approach_lane, ()):
                other = self.vehicles[oid]
                if other.route == ego.route or other.s >= best_pos or other.s <= ego.s:
                    continue
                rel = self.layout.conflicts.get((other.route, ego.route))
                if rel is not None and other.rear < rel.interval_a[1]:
                    best_pos, best_id = other.s, oid
        if best_id is None:
            return NO_LEADER
        other = self.vehicles[best_id]
        gap = best_pos - ego.s - 0.5 * (ego.length + other.length)
        return Leader(best_id, gap, other.v)

    def occupancy(self, vid: int, interval: tuple[float, float]) -> str:
        """'before', 'inside' or 'cleared' relative to an arc-length interval."""
        st = self.vehicles[vid]
        if st.rear >= interval[1]:
            return "cleared"
        if st.front > interval[0]:
            return "inside"
        return "before"

    def crossing_partners(self, vid: int):
        """Yield (other id, relation as seen from ``vid``) for crossing conflicts not yet cleared by either side."""
        ego = self.vehicles[vid]
        if ego.s >= self.layout.routes[ego.route].exit_s + 0.5 * ego.length:
            return
        for oid, other in self.vehicles.items():
            if oid == vid:
                continue
            rel = self.layout.crossing(ego.route, other.route)
            if rel is None:
                continue
            if ego.rear >= rel.interval_a[1] or other.rear >= rel.interval_b[1]:
                continue
            yield oid, rel


def _piece_end(r: Route, piece: str) -> float:
    for pid, _, end in r.pieces:
        if pid == piece:
            return end
    return r.length
