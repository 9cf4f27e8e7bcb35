"""Non-learned intersection controllers.

Every controller decides, per vehicle, whether it may pass its next stop
position; vehicles that may not are given a stationary virtual leader there
and everything else is ordinary car-following.  Decisions to go are sticky
(``grants``): once granted, a vehicle keeps driving until it leaves.

All controllers share one safety rule: a vehicle that has not yet passed its
stop position holds while a granted vehicle on a crossing route has not
cleared the shared conflict area, provided it can still stop.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .behavior import cf_accel, required_decel
from .geometry import IntersectionLayout


def time_to_cover(distance: float, v: float, a: float, v_cap: float) -> float:
    """Shortest time to travel ``distance`` from speed ``v`` accelerating at ``a`` up to ``v_cap``."""
    if distance <= 0:
        return 0.0
    v = min(v, v_cap)
    if a <= 0:
        return distance / v if v > 0 else math.inf
    t_cap = (v_cap - v) / a
    d_cap = v * t_cap + 0.5 * a * t_cap * t_cap
    if distance <= d_cap:
        return (-v + math.sqrt(v * v + 2.0 * a * distance)) / a
    return t_cap + (distance - d_cap) / v_cap


# -- signals ---------------------------------------------------------------


@dataclass(frozen=True)
class SignalPlan:
    phases: tuple  # (group, green, yellow)
    group_lanes: dict

    @property
    def cycle(self) -> float:
        return sum(g + y for _, g, y in self.phases)

    def lane_group(self, lane: str) -> str:
        for group, lanes in self.group_lanes.items():
            if lane in lanes:
                return group
        raise KeyError(f"lane {lane!r} has no signal group")

    def group_state(self, group: str, t: float) -> str:
        tau = math.fmod(t, self.cycle)
        if tau < 0:
            tau += self.cycle
        start = 0.0
        for g, green, yellow in self.phases:
            if g == group:
                if start <= tau < start + green:
                    return "green"
                if start + green <= tau < start + green + yellow:
                    return "yellow"
                return "red"
            start += green + yellow
        return "red"


def signal_plan_for(layout: IntersectionLayout, overrides: dict | None = None) -> SignalPlan:
    overrides = overrides or {}
    phases = []
    for p in layout.signal_plan:
        green = overrides.get(p["group"], {}).get("green", p["green"])
        yellow = overrides.get(p["group"], {}).get("yellow", p["yellow"])
        phases.append((p["group"], float(green), float(yellow)))
    groups: dict[str, list] = {}
    for lane in layout.lanes.values():
        groups.setdefault(lane.group, []).append(lane.id)
    return SignalPlan(tuple(phases), {g: tuple(v) for g, v in groups.items()})


def signal_state(plan: SignalPlan, t: float, lane: str) -> str:
    """'green', 'yellow' or 'red' for an inbound lane at time ``t``."""
    if t < 0:
        raise ValueError("time must be non-negative")
    return plan.group_state(plan.lane_group(lane), t)


# -- shared machinery --------------------------------------------------------


@dataclass
class ReservationLedger:
    """Sticky go-decisions; arrival stamps live on the world."""

    grants: set = field(default_factory=set)
    order: dict = field(default_factory=dict)  # vehicle id -> grant sequence number
    _next: int = 0

    def grant(self, vid: int) -> None:
        if vid not in self.grants:
            self.grants.add(vid)
            self.order[vid] = self._next
            self._next += 1

    def prune(self, world) -> None:
        self.grants &= set(world.vehicles)
        self.order = {v: k for v, k in self.order.items() if v in self.grants}


class Controller:
    name = "base"

    def __init__(self):
        self.ledger = ReservationLedger()

    def reset(self) -> None:
        self.ledger = ReservationLedger()

    def accelerations(self, world) -> dict[int, float]:
        raise NotImplementedError

    # helpers --------------------------------------------------------------
    def _blocked_by_grant(self, world, vid: int) -> bool:
        for oid, _ in world.crossing_partners(vid):
            if oid in self.ledger.grants:
                return True
        return False

    def _leader_pending(self, world, vid: int) -> bool:
        """True if the vehicle ahead on the same inbound lane is still waiting for its grant."""
        lead = world.leader(vid)
        if lead.id is None or lead.id in self.ledger.grants:
            return False
        lr, r = world.route(lead.id), world.route(vid)
        return lr.approach_lane == r.approach_lane and world.vehicles[lead.id].front < lr.halt_s

    def _guard_stop(self, world, vid: int) -> float | None:
        """Entry of the nearest conflict area still occupied by an earlier-granted crossing vehicle.

        Grant order is a strict total order, so waiting on earlier grants
        only can never form a cycle.
        """
        mine = self.ledger.order.get(vid)
        if mine is None:
            return None
        front = world.vehicles[vid].front
        stop = None
        for oid, rel in world.crossing_partners(vid):
            k = self.ledger.order.get(oid)
            if k is None or k > mine or front > rel.interval_a[0]:
                continue
            if stop is None or rel.interval_a[0] < stop:
                stop = rel.interval_a[0]
        return stop

    def _granted_accel(self, world, vid: int) -> float:
        stop = self._guard_stop(world, vid)
        if stop is None:
            return cf_accel(world, vid)
        return cf_accel(world, vid, right_of_way=False, stop_s=stop, source="reservation")

    def _can_stop(self, world, vid: int, stop_s: float, decel: float) -> bool:
        st = world.vehicles[vid]
        return required_decel(st.v, stop_s - st.front) <= decel


class CarFollowingOnly(Controller):
    """No intersection logic at all; used for single-lane tests and as the outer-zone law."""

    name = "cf"

    def accelerations(self, world):
        return {vid: cf_accel(world, vid) for vid in world.vehicles}


class FifoController(Controller):
    """Strict arrival order among vehicles on crossing routes."""

    name = "fifo"

    def accelerations(self, world):
        self.ledger.prune(world)
        out = {}
        for vid in sorted(world.vehicles):
            st = world.vehicles[vid]
            r = world.layout.routes[st.route]
            if vid not in self.ledger.grants:
                if st.front >= r.halt_s:
                    self.ledger.grant(vid)
                elif vid in world.arrival and not self._leader_pending(world, vid) and self._earlier_cleared(world, vid):
                    self.ledger.grant(vid)
            if vid in self.ledger.grants:
                out[vid] = self._granted_accel(world, vid)
            elif vid not in world.arrival:
                out[vid] = cf_accel(world, vid)
            else:
                out[vid] = cf_accel(world, vid, right_of_way=False)
        return out

    @staticmethod
    def _earlier_cleared(world, vid: int) -> bool:
        mine = world.arrival[vid]
        for oid, _ in world.crossing_partners(vid):
            stamp = world.arrival.get(oid)
            if stamp is not None and stamp < mine:
                return False
        return True


class EnhancedFifoController(Controller):
    """Ordering only within conflict groups, by distance to the intersection.

    Priority keys are (distance bin, arrival stamp) and hence totally ordered.
    A follower close behind a vehicle on the same inbound lane inherits that
    vehicle's key (the key it was granted with, once granted), so platoons
    cross in one go.  A vehicle is granted once it cannot reach a shared area
    before every granted partner has left it, and it either outranks all
    pending partners or clears the shared area before any better-ranked one
    could get there (``margin`` seconds to spare in both tests).
    """

    name = "efifo"

    def __init__(self, convoy_headway: float = 2.0, margin: float = 1.0, distance_bin: float = 5.0):
        super().__init__()
        self.convoy_headway = convoy_headway
        self.margin = margin
        self.distance_bin = distance_bin
        self._grant_keys: dict[int, tuple] = {}

    def reset(self) -> None:
        super().reset()
        self._grant_keys = {}

    def _keys(self, world) -> dict[int, tuple]:
        keys = {}
        order = sorted(
            (vid for vid in world.arrival if vid not in self.ledger.grants),
            key=lambda v: -world.vehicles[v].s,
        )
        for vid in order:
            st = world.vehicles[vid]
            r = world.layout.routes[st.route]
            key = (math.floor(max(0.0, r.halt_s - st.front) / self.distance_bin), world.arrival[vid])
            lead = world.leader(vid)
            if lead.id is not None and st.s < r.halt_s and lead.gap <= world.cfg.cf.s0 + 1.0 + self.convoy_headway * st.v:
                if world.route(lead.id).approach_lane == r.approach_lane:
                    inherited = keys.get(lead.id, self._grant_keys.get(lead.id))
                    if inherited is not None:
                        key = min(key, inherited)
            keys[vid] = key
        return keys

    def accelerations(self, world):
        self.ledger.prune(world)
        self._grant_keys = {v: k for v, k in self._grant_keys.items() if v in self.ledger.grants}
        for vid, st in world.vehicles.items():
            if vid not in self.ledger.grants and st.front >= world.layout.routes[st.route].halt_s:
                self.ledger.grant(vid)
        keys = self._keys(world)
        for vid in sorted(keys, key=keys.get):
            if self._leader_pending(world, vid):
                continue
            if self._fits(world, vid) and self._has_priority(world, vid, keys):
                self.ledger.grant(vid)
                self._grant_keys[vid] = keys[vid]
        out = {}
        for vid in sorted(world.vehicles):
            if vid in self.ledger.grants:
                out[vid] = self._granted_accel(world, vid)
            elif vid in world.arrival:
                out[vid] = cf_accel(world, vid, right_of_way=False)
            else:
                out[vid] = cf_accel(world, vid)
        return out

    def _has_priority(self, world, vid, keys) -> bool:
        cfg = world.cfg
        ego = world.vehicles[vid]
        mine = keys[vid]
        for oid, rel in world.crossing_partners(vid):
            other_key = keys.get(oid)
            if oid in self.ledger.grants or other_key is None or other_key > mine:
                continue
            other = world.vehicles[oid]
            t_reach = time_to_cover(rel.interval_b[0] - other.front, other.v, cfg.limits.a_max, cfg.cf.v0)
            if other.v < 0.1:
                t_reach += cfg.cf.drive_off_delay
            t_clear = time_to_cover(rel.interval_a[1] - ego.rear, ego.v, cfg.cf.a, cfg.cf.v0)
            if t_clear + self.margin > t_reach:
                return False
        return True

    def _fits(self, world, vid) -> bool:
        cfg = world.cfg
        ego = world.vehicles[vid]
        for oid, rel in world.crossing_partners(vid):
            if oid not in self.ledger.grants:
                continue
            other = world.vehicles[oid]
            t_clear = time_to_cover(rel.interval_b[1] - other.rear, other.v, cfg.cf.a, cfg.cf.v0)
            if other.v < 0.1:
                t_clear += cfg.cf.drive_off_delay
            t_reach = time_to_cover(rel.interval_a[0] - ego.front, ego.v, cfg.limits.a_max, cfg.cf.v0)
            if t_reach < t_clear + self.margin:
                return False
        return True


def _rank(route) -> int:
    base = 0 if route.priority == "main" else 2
    return base + (1 if route.turn == "left" else 0)


class PriorityRuleController(Controller):
    """Static right of way: main road first, left turns yield to oncoming traffic.

    A yielding vehicle goes when, for every conflicting prioritised vehicle,
    that vehicle needs longer to reach the conflict area than the ego needs
    to clear it plus a safety margin.  Arrival time breaks ties between equal
    ranks.
    """

    name = "pr"

    def accelerations(self, world):
        self.ledger.prune(world)
        cfg = world.cfg
        out = {}
        for vid in sorted(world.vehicles):
            st = world.vehicles[vid]
            r = world.layout.routes[st.route]
            if vid not in self.ledger.grants and st.front >= r.halt_s:
                self.ledger.grant(vid)
            if vid in self.ledger.grants:
                out[vid] = self._granted_accel(world, vid)
                continue
            go, overtakes_queue = self._gap_ok(world, vid)
            if go and (overtakes_queue or not self._can_stop(world, vid, r.halt_s, cfg.cf.b)):
                # commit: either stopping is no longer comfortable, or the grant
                # must be visible to the queued partners that were skipped
                self.ledger.grant(vid)
            if go and self._blocked_by_grant(world, vid) and self._can_stop(world, vid, r.halt_s, abs(cfg.limits.a_min)):
                go = False
            out[vid] = cf_accel(world, vid, right_of_way=go)
        return out

    def _gap_ok(self, world, vid) -> tuple[bool, bool]:
        """Gap test against prioritised partners; returns (go, skipped a queued partner).

        A prioritised partner stuck behind a stopped, ungranted vehicle that
        arrived after the ego is skipped.  Without this, shared lanes can form
        waiting cycles (two oncoming left-turners each waiting for traffic
        queued behind the other).
        """
        cfg = world.cfg
        ego = world.vehicles[vid]
        r = world.layout.routes[ego.route]
        my_arrival = world.arrival.get(vid, (math.inf, 0))
        my_rank = (_rank(r), my_arrival)
        skipped = False
        for oid, rel in world.crossing_partners(vid):
            other = world.vehicles[oid]
            orank = (_rank(world.layout.routes[other.route]), world.arrival.get(oid, (math.inf, 0)))
            if orank >= my_rank:
                continue
            if oid in self.ledger.grants and other.front > rel.interval_b[0]:
                return False, False
            t_other = time_to_cover(rel.interval_b[0] - other.front, other.v, cfg.limits.a_max, cfg.cf.v0)
            t_mine = time_to_cover(rel.interval_a[1] - ego.rear, ego.v, cfg.cf.a, cfg.cf.v0)
            if t_other <= t_mine + cfg.pr_margin:
                blocker = self._queue_blocker(world, oid)
                if (
                    blocker is not None
                    and world.arrival.get(blocker, (math.inf, 0)) > my_arrival
                    and ego.v < cfg.stop_speed
                    and not self._leader_pending(world, vid)
                ):
                    skipped = True
                    continue
                return False, False
        return True, skipped

    def _queue_blocker(self, world, vid: int, max_depth: int = 50) -> int | None:
        """Nearest stopped, ungranted vehicle ahead on the same inbound lane, if any."""
        lane = world.route(vid).approach_lane
        cur = vid
        for _ in range(max_depth):
            lead = world.leader(cur).id
            if lead is None or lead in self.ledger.grants:
                return None
            lr = world.route(lead)
            st = world.vehicles[lead]
            if lr.approach_lane != lane or st.front >= lr.halt_s:
                return None
            if st.v < world.cfg.stop_speed:
                return lead
            cur = lead
        return None


class TrafficLightController(Controller):
    """Fixed-time signals; permissive left turns wait inside the box.

    A permissive left-turner (one that shares its green with oncoming
    traffic) may enter on green and waits just before the first conflict
    area on its path, gap-accepting oncoming vehicles that will not stop.
    Once its own signal has ended it is cleared out with priority.
    """

    name = "tl"

    def __init__(self, plan: SignalPlan | None = None, margin: float = 2.0):
        super().__init__()
        self.plan = plan
        self.margin = margin
        self._wait: dict[str, float] = {}
        self._layout_kind = None

    def _prepare(self, layout):
        if self._layout_kind == layout.kind and self.plan is not None:
            return
        self._layout_kind = layout.kind
        if self.plan is None:
            self.plan = signal_plan_for(layout)
        self._wait = {}
        for rid, r in layout.routes.items():
            if r.turn != "left":
                continue
            group = self.plan.lane_group(r.approach_lane)
            crossing = [(b, rel) for (a, b), rel in layout.conflicts.items() if a == rid and rel.kind == "crossing"]
            if any(self.plan.lane_group(layout.routes[b].approach_lane) == group for b, _ in crossing):
                self._wait[rid] = min(rel.interval_a[0] for _, rel in crossing)

    def accelerations(self, world):
        layout = world.layout
        self._prepare(layout)
        self.ledger.prune(world)
        cfg = world.cfg
        out = {}
        for vid in sorted(world.vehicles):
            st = world.vehicles[vid]
            r = layout.routes[st.route]
            wait_s = self._wait.get(r.id)
            state = signal_state(self.plan, world.t, r.approach_lane)
            if vid not in self.ledger.grants and st.front >= r.halt_s and (wait_s is None or state != "green"):
                # past the stop line: through traffic is committed, waiting left-turners clear out
                self.ledger.grant(vid)
            if vid in self.ledger.grants:
                out[vid] = self._granted_accel(world, vid)
                continue
            if st.front < r.halt_s:
                if state == "green":
                    go = True
                elif state == "yellow":
                    go = not self._can_stop(world, vid, r.halt_s, cfg.cf.b)
                else:
                    go = False
                if go and self._blocked_by_grant(world, vid) and self._can_stop(world, vid, r.halt_s, abs(cfg.limits.a_min)):
                    go = False
                if go and (wait_s is None or state == "yellow") and not self._can_stop(world, vid, r.halt_s, cfg.cf.b):
                    self.ledger.grant(vid)
                if not go:
                    out[vid] = cf_accel(world, vid, right_of_way=False, source="signal")
                    continue
                if vid in self.ledger.grants:
                    out[vid] = self._granted_accel(world, vid)
                    continue
                if wait_s is None:
                    out[vid] = cf_accel(world, vid)
                    continue
            # permissive left turn: proceed to the waiting position, then gap-accept
            go = self._left_gap_ok(world, vid)
            if go and not self._can_stop(world, vid, wait_s, cfg.cf.b):
                self.ledger.grant(vid)
                out[vid] = self._granted_accel(world, vid)
                continue
            out[vid] = cf_accel(world, vid, right_of_way=go, stop_s=wait_s)
        return out

    def _will_stop(self, world, oid) -> bool:
        other = world.vehicles[oid]
        r = world.layout.routes[other.route]
        if oid in self.ledger.grants or other.front >= r.halt_s:
            return False
        state = signal_state(self.plan, world.t, r.approach_lane)
        if state == "red":
            return True
        return state == "yellow" and self._can_stop(world, oid, r.halt_s, world.cfg.cf.b)

    def _left_gap_ok(self, world, vid) -> bool:
        cfg = world.cfg
        ego = world.vehicles[vid]
        mine = world.arrival.get(vid, (math.inf, 0))
        for oid, rel in world.crossing_partners(vid):
            other = world.vehicles[oid]
            ro = world.layout.routes[other.route]
            if oid in self.ledger.grants:
                return False
            if self._will_stop(world, oid):
                continue
            if ro.id in self._wait:
                if world.arrival.get(oid, (math.inf, 0)) < mine:
                    return False
                continue
            if other.front > rel.interval_b[0]:
                return False
            t_other = time_to_cover(rel.interval_b[0] - other.front, other.v, cfg.limits.a_max, cfg.cf.v0)
            t_mine = time_to_cover(rel.interval_a[1] - ego.rear, ego.v, cfg.cf.a, cfg.cf.v0)
            if t_other <= t_mine + self.margin:
                return False
        return True


def tl_control(world, plan: SignalPlan, controller: TrafficLightController | None = None) -> dict[int, float]:
    controller = controller or TrafficLightController(plan)
    return controller.accelerations(world)


def fifo_control(world, ledger: ReservationLedger) -> dict[int, float]:
    c = FifoController()
    c.ledger = ledger
    return c.accelerations(world)


def efifo_control(world, ledger: ReservationLedger | None = None) -> dict[int, float]:
    c = EnhancedFifoController()
    if ledger is not None:
        c.ledger = ledger
    return c.accelerations(world)


def pr_control(world, ledger: ReservationLedger | None = None) -> dict[int, float]:
    c = PriorityRuleController()
    if ledger is not None:
        c.ledger = ledger
    return c.accelerations(world)


CONTROLLERS = {
    "tl": TrafficLightController,
    "fifo": FifoController,
    "efifo": EnhancedFifoController,
    "pr": PriorityRuleController,
    "cf": CarFollowingOnly,
}


def make_controller(name: str) -> Controller:
    try:
        return CONTROLLERS[name]()
    except KeyError:
        raise ValueError(f"unknown controller {name!r}; expected one of {sorted(CONTROLLERS)} or 'rl'") from None
