"""Intersection layouts, fixed vehicle routes and route conflict relations.

Coordinates are metres in a right-handed frame centred on the intersection.
The main road runs east-west, the side road north-south, and traffic keeps
to the right.  Every route is a G1-continuous chain of straight and circular
segments: inbound lane, connector through the intersection box, outbound lane.
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

LAYOUT_KINDS = ("S", "M", "L", "XL")
LAYOUT_FORMAT_VERSION = 1
TURNS = ("through", "left", "right")

_ARM_DIRECTION = {"W": (-1.0, 0.0), "E": (1.0, 0.0), "S": (0.0, -1.0), "N": (0.0, 1.0)}
_ARM_ROAD = {"W": "main", "E": "main", "S": "side", "N": "side"}


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_angle(self.heading))


class Straight:
    kind = "straight"

    def __init__(self, start, heading: float, length: float):
        self.start = (float(start[0]), float(start[1]))
        self.heading = float(heading)
        self.length = float(length)
        self._u = (math.cos(heading), math.sin(heading))

    def pose(self, u: float) -> tuple[float, float, float]:
        return (self.start[0] + u * self._u[0], self.start[1] + u * self._u[1], self.heading)

    def points(self, u: np.ndarray) -> np.ndarray:
        return np.stack([self.start[0] + u * self._u[0], self.start[1] + u * self._u[1]], axis=-1)

    @property
    def end(self):
        return self.pose(self.length)[:2]

    def distance(self, pts: np.ndarray) -> np.ndarray:
        rel = pts - np.asarray(self.start)
        t = np.clip(rel @ np.asarray(self._u), 0.0, self.length)
        foot = np.asarray(self.start) + t[:, None] * np.asarray(self._u)
        return np.hypot(*(pts - foot).T)

    def to_dict(self) -> dict:
        return {"type": "straight", "start": list(self.start), "heading": self.heading, "length": self.length}


class Arc:
    """Circular arc; ``turn`` is +1 for counter-clockwise (left), -1 for clockwise."""

    kind = "arc"

    def __init__(self, start, heading: float, radius: float, turn: int, sweep: float):
        if radius <= 0 or sweep <= 0:
            raise ValueError("arc needs positive radius and sweep")
        self.radius = float(radius)
        self.turn = int(turn)
        self.sweep = float(sweep)
        self.length = self.radius * self.sweep
        self.start_heading = float(heading)
        nx, ny = -math.sin(heading) * turn, math.cos(heading) * turn
        self.center = (start[0] + radius * nx, start[1] + radius * ny)
        self.start_angle = heading - turn * math.pi / 2.0

    def pose(self, u: float) -> tuple[float, float, float]:
        phi = self.start_angle + self.turn * u / self.radius
        return (
            self.center[0] + self.radius * math.cos(phi),
            self.center[1] + self.radius * math.sin(phi),
            self.start_heading + self.turn * u / self.radius,
        )

    def points(self, u: np.ndarray) -> np.ndarray:
        phi = self.start_angle + self.turn * u / self.radius
        return np.stack([self.center[0] + self.radius * np.cos(phi), self.center[1] + self.radius * np.sin(phi)], axis=-1)

    @property
    def end(self):
        return self.pose(self.length)[:2]

    def distance(self, pts: np.ndarray) -> np.ndarray:
        rel = pts - np.asarray(self.center)
        ang = np.arctan2(rel[:, 1], rel[:, 0])
        swept = np.mod(self.turn * (ang - self.start_angle), 2.0 * math.pi)
        on_arc = swept <= self.sweep
        radial = np.abs(np.hypot(rel[:, 0], rel[:, 1]) - self.radius)
        p0 = np.asarray(self.pose(0.0)[:2])
        p1 = np.asarray(self.end)
        ends = np.minimum(np.hypot(*(pts - p0).T), np.hypot(*(pts - p1).T))
        return np.where(on_arc, radial, ends)

    def to_dict(self) -> dict:
        return {
            "type": "arc",
            "center": list(self.center),
            "radius": self.radius,
            "turn": self.turn,
            "start_heading": self.start_heading,
            "sweep": self.sweep,
        }


@dataclass(frozen=True)
class Route:
    id: str
    segments: tuple
    length: float
    approach_lane: str
    exit_lane: str
    priority: str
    turn: str
    halt_s: float
    exit_s: float
    spawn_s: float
    control_s: float
    arm_in: str
    arm_out: str
    _starts: tuple = field(repr=False, compare=False, default=())

    @property
    def pieces(self) -> tuple:
        """(piece id, start arc length, end arc length): inbound lane, connector, outbound lane."""
        return (
            (self.approach_lane, 0.0, self.halt_s),
            (self.id, self.halt_s, self.exit_s),
            (self.exit_lane, self.exit_s, self.length),
        )

    def piece_at(self, s: float) -> tuple[str, float]:
        """Return the lane piece containing ``s`` and the arc length at which that piece starts."""
        if s < self.halt_s:
            return self.approach_lane, 0.0
        if s < self.exit_s:
            return self.id, self.halt_s
        return self.exit_lane, self.exit_s

    def piece_offset(self, piece: str) -> float | None:
        for pid, start, _ in self.pieces:
            if pid == piece:
                return start
        return None

    def pose_at(self, s: float) -> Pose:
        return Pose(*self.xyh(s))

    def xyh(self, s: float) -> tuple[float, float, float]:
        if s < -1e-9 or s > self.length + 1e-9:
            raise ValueError(f"arc length {s} outside route {self.id} [0, {self.length}]")
        s = min(max(s, 0.0), self.length)
        i = max(bisect.bisect_right(self._starts, s) - 1, 0)
        i = min(i, len(self.segments) - 1)
        return self.segments[i].pose(s - self._starts[i])

    def points(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        out = np.empty(s.shape + (2,))
        idx = np.clip(np.searchsorted(self._starts, s, side="right") - 1, 0, len(self.segments) - 1)
        for i, seg in enumerate(self.segments):
            m = idx == i
            if m.any():
                out[m] = seg.points(s[m] - self._starts[i])
        return out

    def connector_segments(self) -> list:
        return [seg for seg, st in zip(self.segments, self._starts) if self.halt_s - 1e-9 <= st < self.exit_s - 1e-9]

    def distance_to_connector(self, pts: np.ndarray) -> np.ndarray:
        return np.min([seg.distance(pts) for seg in self.connector_segments()], axis=0)

    def key(self) -> tuple[str, str]:
        """Layout-independent identity used to map routes between layouts."""
        return (self.arm_in, self.turn)


def _make_route(rid, segments, **kw) -> Route:
    starts, acc = [], 0.0
    for seg in segments:
        starts.append(acc)
        acc += seg.length
    return Route(id=rid, segments=tuple(segments), length=acc, _starts=tuple(starts), **kw)


@dataclass(frozen=True)
class ConflictRelation:
    route_a: str
    route_b: str
    kind: str  # "crossing" | "same_lane_prefix"
    interval_a: tuple[float, float]
    interval_b: tuple[float, float]

    def swapped(self) -> "ConflictRelation":
        return ConflictRelation(self.route_b, self.route_a, self.kind, self.interval_b, self.interval_a)


@dataclass(frozen=True)
class InboundLane:
    id: str
    arm: str
    road: str
    turns: tuple
    group: str
    demand: float
    routes: tuple


@dataclass(frozen=True)
class IntersectionLayout:
    kind: str
    routes: dict
    conflicts: dict
    lanes: dict
    signal_plan: tuple
    half_x: float
    half_y: float
    approach_length: float
    control_length: float
    exit_length: float

    def relation(self, a: str, b: str) -> ConflictRelation | None:
        return self.conflicts.get((a, b))

    def crossing(self, a: str, b: str) -> ConflictRelation | None:
        rel = self.conflicts.get((a, b))
        return rel if rel is not None and rel.kind == "crossing" else None

    def lane_group(self, lane: str) -> str:
        return self.lanes[lane].group

    def route_by_key(self) -> dict:
        return {r.key(): r.id for r in self.routes.values()}

    def to_dict(self) -> dict:
        return {
            "version": LAYOUT_FORMAT_VERSION,
            "kind": self.kind,
            "box": {"half_x": self.half_x, "half_y": self.half_y},
            "routes": {
                rid: {
                    "length": r.length,
                    "halt_s": r.halt_s,
                    "exit_s": r.exit_s,
                    "approach_lane": r.approach_lane,
                    "exit_lane": r.exit_lane,
                    "turn": r.turn,
                    "priority": r.priority,
                    "segments": [seg.to_dict() for seg in r.segments],
                }
                for rid, r in self.routes.items()
            },
            "conflicts": [
                {"a": c.route_a, "b": c.route_b, "kind": c.kind, "interval_a": list(c.interval_a), "interval_b": list(c.interval_b)}
                for (a, b), c in sorted(self.conflicts.items())
                if a < b
            ],
        }


def _rot90(v, sign):
    return (-sign * v[1], sign * v[0])


def _heading(v) -> float:
    return math.atan2(v[1], v[0])


def _connector(entry, u_in, exit_pt, u_out, turn: str) -> list:
    h_in = _heading(u_in)
    if turn == "through":
        rel = (exit_pt[0] - entry[0], exit_pt[1] - entry[1])
        lateral = rel[0] * -u_in[1] + rel[1] * u_in[0]
        if abs(lateral) > 1e-9:
            raise ValueError("through movement between misaligned lanes")
        return [Straight(entry, h_in, rel[0] * u_in[0] + rel[1] * u_in[1])]
    sign = 1 if turn == "left" else -1
    d0 = (exit_pt[0] - entry[0]) * u_in[0] + (exit_pt[1] - entry[1]) * u_in[1]
    corner = (entry[0] + d0 * u_in[0], entry[1] + d0 * u_in[1])
    d1 = (exit_pt[0] - corner[0]) * u_out[0] + (exit_pt[1] - corner[1]) * u_out[1]
    if d0 <= 0 or d1 <= 0:
        raise ValueError(f"{turn} turn has no room inside the box")
    r = min(d0, d1)
    segs = []
    p = entry
    if d0 - r > 1e-12:
        segs.append(Straight(p, h_in, d0 - r))
        p = segs[-1].end
    arc = Arc(p, h_in, r, sign, math.pi / 2.0)
    segs.append(arc)
    if d1 - r > 1e-12:
        segs.append(Straight(arc.end, _heading(u_out), d1 - r))
    return segs


def _target_arm(arm: str, turn: str) -> str:
    d = _ARM_DIRECTION[arm]
    u = (-d[0], -d[1])
    if turn == "through":
        out = u
    else:
        out = _rot90(u, 1 if turn == "left" else -1)
    for name, vec in _ARM_DIRECTION.items():
        if abs(vec[0] - out[0]) < 1e-12 and abs(vec[1] - out[1]) < 1e-12:
            return name
    raise AssertionError("unreachable")


def _interval_edges(f, s_grid: np.ndarray, mask: np.ndarray) -> list[tuple[float, float]]:
    """Turn a sampled membership mask into runs with bisection-refined edges."""
    runs = []
    n = len(mask)
    i = 0
    while i < n:
        if not mask[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and mask[j + 1]:
            j += 1
        lo = s_grid[i] if i == 0 else _bisect_edge(f, s_grid[i - 1], s_grid[i])
        hi = s_grid[j] if j == n - 1 else _bisect_edge(f, s_grid[j + 1], s_grid[j])
        runs.append((float(lo), float(hi)))
        i = j + 1
    return runs


def _bisect_edge(f, outside: float, inside: float) -> float:
    for _ in range(60):
        mid = 0.5 * (outside + inside)
        if f(mid):
            inside = mid
        else:
            outside = mid
        if abs(inside - outside) < 1e-10:
            break
    return inside


def _conflict_runs(ra: Route, rb: Route, half_width: float, step: float = 0.1):
    thr = 2.0 * half_width
    n = max(int(math.ceil((ra.exit_s - ra.halt_s) / step)), 1)
    s_grid = np.linspace(ra.halt_s, ra.exit_s, n + 1)
    mask = rb.distance_to_connector(ra.points(s_grid)) < thr

    def inside(s):
        p = np.asarray([ra.xyh(s)[:2]])
        return bool(rb.distance_to_connector(p)[0] < thr)

    return _interval_edges(inside, s_grid, mask)


def conflict_between(route_a: Route, route_b: Route, half_width: float) -> ConflictRelation | None:
    """Pairwise relation of two routes of one layout.

    Routes fed by the same inbound lane are related over their common prefix up
    to the point where their dilated paths separate.  Otherwise the relation is
    a crossing when the dilated connectors overlap; the intervals cover the
    overlapping part of each connector (the hull if it is not contiguous).
    """
    if route_a.id == route_b.id:
        return None
    runs_a = _conflict_runs(route_a, route_b, half_width)
    runs_b = _conflict_runs(route_b, route_a, half_width)
    if route_a.approach_lane == route_b.approach_lane:
        end_a = runs_a[0][1] if runs_a and runs_a[0][0] <= route_a.halt_s + 1e-9 else route_a.halt_s
        end_b = runs_b[0][1] if runs_b and runs_b[0][0] <= route_b.halt_s + 1e-9 else route_b.halt_s
        return ConflictRelation(route_a.id, route_b.id, "same_lane_prefix", (0.0, end_a), (0.0, end_b))
    if not runs_a or not runs_b:
        return None
    return ConflictRelation(
        route_a.id,
        route_b.id,
        "crossing",
        (runs_a[0][0], runs_a[-1][1]),
        (runs_b[0][0], runs_b[-1][1]),
    )


def _check_schema(data: dict, source: str) -> None:
    if data.get("version") != LAYOUT_FORMAT_VERSION:
        raise ValueError(f"{source}: unsupported layout version {data.get('version')!r}")
    for key in ("kind", "roads", "arms", "signal_plan", "approach_length", "control_length", "exit_length"):
        if key not in data:
            raise ValueError(f"{source}: missing key {key!r}")
    for arm in data["arms"]:
        if arm not in _ARM_DIRECTION:
            raise ValueError(f"{source}: unknown arm {arm!r}")
        if data["arms"][arm]["road"] != _ARM_ROAD[arm]:
            raise ValueError(f"{source}: arm {arm} must belong to the {_ARM_ROAD[arm]} road")


def layout_from_dict(data: dict, half_width: float = 1.25, source: str = "<dict>") -> IntersectionLayout:
    _check_schema(data, source)
    setback = float(data.get("setback", 0.0))
    half_x = data["roads"]["side"]["half_width"] + setback
    half_y = data["roads"]["main"]["half_width"] + setback
    approach = float(data["approach_length"])
    control = float(data["control_length"])
    exit_len = float(data["exit_length"])
    arms = data["arms"]

    def edge(arm):
        return half_x if arm in ("W", "E") else half_y

    routes, lanes = {}, {}
    for arm, spec in arms.items():
        d = _ARM_DIRECTION[arm]
        u_in = (-d[0], -d[1])
        n_in = (u_in[1], -u_in[0])
        for lane in spec["inbound"]:
            off = float(lane["offset"])
            entry = (d[0] * edge(arm) + off * n_in[0], d[1] * edge(arm) + off * n_in[1])
            spawn = (entry[0] - approach * u_in[0], entry[1] - approach * u_in[1])
            lane_routes = []
            for turn in lane["turns"]:
                if turn not in TURNS:
                    raise ValueError(f"{source}: unknown turn {turn!r}")
                tgt = _target_arm(arm, turn)
                if tgt not in arms:
                    raise ValueError(f"{source}: lane {lane['id']} turns {turn} into missing arm {tgt}")
                u_out = _ARM_DIRECTION[tgt]
                n_out = (u_out[1], -u_out[0])
                out_off = float(arms[tgt]["outbound"]["offset"])
                exit_pt = (u_out[0] * edge(tgt) + out_off * n_out[0], u_out[1] * edge(tgt) + out_off * n_out[1])
                segs = [Straight(spawn, _heading(u_in), approach)]
                conn = _connector(entry, u_in, exit_pt, u_out, turn)
                segs += conn
                segs.append(Straight(exit_pt, _heading(u_out), exit_len))
                rid = f"{lane['id']}:{turn}"
                conn_len = sum(s.length for s in conn)
                routes[rid] = _make_route(
                    rid,
                    segs,
                    approach_lane=lane["id"],
                    exit_lane=arms[tgt]["outbound"]["id"],
                    priority=spec["road"],
                    turn=turn,
                    halt_s=approach,
                    exit_s=approach + conn_len,
                    spawn_s=0.0,
                    control_s=approach - control,
                    arm_in=arm,
                    arm_out=tgt,
                )
                lane_routes.append(rid)
            lanes[lane["id"]] = InboundLane(
                id=lane["id"],
                arm=arm,
                road=spec["road"],
                turns=tuple(lane["turns"]),
                group=lane["group"],
                demand=float(lane["demand"]),
                routes=tuple(lane_routes),
            )

    conflicts = {}
    ids = list(routes)
    for i, a in enumerate(ids):
        for b in ids[i + 1 :]:
            rel = conflict_between(routes[a], routes[b], half_width)
            if rel is not None:
                conflicts[(a, b)] = rel
                conflicts[(b, a)] = rel.swapped()
    plan = tuple(dict(p) for p in data["signal_plan"])
    return IntersectionLayout(
        kind=data["kind"],
        routes=routes,
        conflicts=conflicts,
        lanes=lanes,
        signal_plan=plan,
        half_x=half_x,
        half_y=half_y,
        approach_length=approach,
        control_length=control,
        exit_length=exit_len,
    )


def load_layout(path: str | Path, half_width: float = 1.25) -> IntersectionLayout:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    return layout_from_dict(data, half_width, source=str(path))


@lru_cache(maxsize=None)
def build_layout(kind: str, half_width: float = 1.25) -> IntersectionLayout:
    """Build one of the bundled layouts (S, M, L, XL)."""
    if kind not in LAYOUT_KINDS:
        raise ValueError(f"unknown layout {kind!r}; expected one of {LAYOUT_KINDS}")
    text = resources.files("gnnaim.layouts").joinpath(f"{kind}.yaml").read_text(encoding="utf-8")
    return layout_from_dict(yaml.safe_load(text), half_width, source=f"{kind}.yaml")
