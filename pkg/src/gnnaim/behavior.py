"""Car-following: IDM, a drive-off extension of it, and right-of-way handling.

Yielding is expressed purely through the leader: when a vehicle has to give
way, the leader it sees is replaced by a stationary obstacle at its halt
point whenever that obstacle is closer than the real leader.  The car-following
law itself never knows about intersections.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .config import CfParams, VehicleLimits

# speeds below this count as standing still for drive-off logic
STANDSTILL = 0.1
# distance (m) short of a stop position at which yielding vehicles come to rest
STOP_BUFFER = 1.0


@dataclass(frozen=True)
class LeaderView:
    gap: float
    speed: float
    source: str = "vehicle"  # vehicle | halt | signal | none

    def __post_init__(self):
        if self.gap < 0:
            object.__setattr__(self, "gap", 0.0)


FREE_ROAD = LeaderView(math.inf, 0.0, "none")


def desired_gap(v: float, dv: float, p: CfParams, headway: float | None = None) -> float:
    T = p.T if headway is None else headway
    return p.s0 + max(0.0, v * T + v * dv / (2.0 * math.sqrt(p.a * p.b)))


def idm_accel(v: float, view: LeaderView, params: CfParams, limits: VehicleLimits = VehicleLimits()) -> float:
    """Intelligent Driver Model acceleration, clamped to the vehicle limits."""
    free = 1.0 - (v / params.v0) ** params.delta
    if math.isinf(view.gap):
        acc = params.a * free
    elif view.gap <= 0.0:
        return limits.a_min if v > 0 else min(0.0, params.a * free)
    else:
        s_star = desired_gap(v, v - view.speed, params)
        acc = params.a * (free - (s_star / view.gap) ** 2)
    return min(max(acc, limits.a_min), limits.a_max)


def equilibrium_gap(v: float, params: CfParams) -> float:
    """Bumper gap at which a follower at speed ``v`` behind an equally fast leader has zero IDM acceleration."""
    free = 1.0 - (v / params.v0) ** params.delta
    if free <= 0:
        return math.inf
    return desired_gap(v, 0.0, params) / math.sqrt(free)


@dataclass(frozen=True)
class DriveOffContext:
    """Per-vehicle launch state carried between steps."""

    waited: float = 0.0
    launching: bool = False


IDLE = DriveOffContext()


def _released(view: LeaderView, params: CfParams) -> bool:
    return view.speed > STANDSTILL or view.gap > params.s0 + 2.0


def update_drive_off(ctx: DriveOffContext, v: float, view: LeaderView, params: CfParams, dt: float) -> DriveOffContext:
    if v < STANDSTILL:
        if _released(view, params):
            waited = ctx.waited + dt
            return DriveOffContext(waited, waited >= params.drive_off_delay - 1e-9)
        return IDLE
    if ctx.launching and not math.isinf(view.gap) and view.gap < desired_gap(v, v - view.speed, params):
        return DriveOffContext(0.0, True)
    return IDLE


def eidm_accel(
    v: float,
    view: LeaderView,
    params: CfParams,
    limits: VehicleLimits = VehicleLimits(),
    ctx: DriveOffContext = IDLE,
) -> float:
    """IDM with a deterministic drive-off reaction and a compact launch gap.

    A stopped vehicle whose obstacle has released waits ``drive_off_delay``
    and then launches using a desired gap of ``s0/2 + v**2*T/v0``, which
    keeps queues tight while they accelerate.  Outside a launch the result is
    plain IDM.
    """
    base = idm_accel(v, view, params, limits)
    if v < STANDSTILL and _released(view, params) and not ctx.launching:
        return min(base, 0.0)
    if not ctx.launching or view.source != "vehicle" or view.gap <= 0.0:
        # compact launch gaps only behind real vehicles, never at stop positions
        return base
    s_star = 0.5 * params.s0 + max(0.0, v * v * params.T / params.v0 + v * (v - view.speed) / (2.0 * math.sqrt(params.a * params.b)))
    acc = params.a * (1.0 - (v / params.v0) ** params.delta - (s_star / view.gap) ** 2)
    return max(base, min(max(acc, limits.a_min), limits.a_max))


def car_following(v: float, view: LeaderView, params: CfParams, limits: VehicleLimits, ctx: DriveOffContext = IDLE) -> float:
    if params.variant == "EIDM":
        return eidm_accel(v, view, params, limits, ctx)
    return idm_accel(v, view, params, limits)


def resolve_leader(ego, world, right_of_way: bool = True, stop_s: float | None = None, source: str = "halt") -> LeaderView:
    """Leader seen by ``ego`` with the halt-point substitution for yielding vehicles.

    ``stop_s`` overrides the route's halt point (signal stop lines, in-box
    waiting positions of left-turners).  The stationary obstacle sits one
    standstill gap minus ``STOP_BUFFER`` beyond the stop position, so a
    yielding vehicle comes to rest just short of it and never creeps past.
    A vehicle whose front is already past the stop position cannot yield
    there any more and keeps its real leader.
    """
    lead = world.leader(ego.id)
    view = FREE_ROAD if lead.id is None else LeaderView(lead.gap, lead.speed, "vehicle")
    if right_of_way:
        return view
    halt = world.layout.routes[ego.route].halt_s if stop_s is None else stop_s
    to_halt = halt - ego.front
    if to_halt < 0.0:
        return view
    if lead.id is None or lead.gap > to_halt:
        return LeaderView(to_halt + max(0.0, world.cfg.cf.s0 - STOP_BUFFER), 0.0, source)
    return view


def cf_accel(world, vid: int, right_of_way: bool = True, stop_s: float | None = None, source: str = "halt") -> float:
    """Car-following acceleration for one vehicle; updates its drive-off state in ``world``."""
    ego = world.vehicles[vid]
    cfg = world.cfg
    view = resolve_leader(ego, world, right_of_way, stop_s, source)
    ctx = update_drive_off(world.drive_off.get(vid, IDLE), ego.v, view, cfg.cf, cfg.dt)
    world.drive_off[vid] = ctx
    if view.gap <= 0.0 and ego.v > 0.0:
        world.log("emergency_brake", vehicle=vid, source=view.source)
    return car_following(ego.v, view, cfg.cf, cfg.limits, ctx)


def required_decel(v: float, distance: float) -> float:
    """Constant deceleration needed to stop from ``v`` within ``distance``."""
    if distance <= 0:
        return math.inf if v > 0 else 0.0
    return v * v / (2.0 * distance)
