"""Fixed-step episode loop and per-episode metrics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..baselines import make_controller
from ..config import SimConfig
from ..dynamics import check_collisions, step_vehicle
from ..geometry import build_layout
from ..world import World
from .traffic import Spawner

CONTROLLER_KINDS = ("cf", "tl", "fifo", "efifo", "pr", "rl")
# controllers for which any collision is a bug rather than a measured outcome
STRICT_KINDS = ("tl", "fifo", "efifo", "pr")


class SafetyViolation(RuntimeError):
    """A collision happened under a controller that must never collide."""


@dataclass
class ScenarioConfig:
    layout: str = "L"
    controller: str = "tl"
    demand: float = 0.15  # vehicles/s on a main through lane
    duration: float = 100.0
    seed: int = 0
    weights: str | None = None
    vehicle_cap: int | None = None
    sim: SimConfig = field(default_factory=SimConfig)

    def __post_init__(self):
        if self.controller not in CONTROLLER_KINDS:
            raise ValueError(f"unknown controller {self.controller!r}; choose from {', '.join(CONTROLLER_KINDS)}")
        if self.demand < 0:
            raise ValueError("demand must be non-negative")
        if self.duration <= 0:
            raise ValueError("duration must be positive")

    @property
    def dt(self) -> float:
        return self.sim.dt

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sim"] = self.sim.to_dict()
        return d


@dataclass
class VehicleRecord:
    id: int
    route: str
    spawn_time: float
    min_speed: float
    end_time: float | None = None
    collided: bool = False


@dataclass
class MetricsRecord:
    episode_id: str
    layout: str
    controller: str
    demand: float
    seed: int
    duration: float
    flow_rate: float
    durations: list
    stop_flags: list
    collisions: int
    collided_vehicles: int
    spawned: int
    completed: int
    active_at_end: int

    @property
    def stop_fraction(self) -> float:
        return float(np.mean(self.stop_flags)) if self.stop_flags else 0.0

    @property
    def median_duration(self) -> float:
        return float(np.median(self.durations)) if self.durations else math.nan

    @property
    def collision_fraction(self) -> float:
        return self.collided_vehicles / self.spawned if self.spawned else 0.0

    def summary_row(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "layout": self.layout,
            "controller": self.controller,
            "demand": self.demand,
            "seed": self.seed,
            "flow_rate": self.flow_rate,
            "median_duration": self.median_duration,
            "stop_fraction": self.stop_fraction,
            "collisions": self.collisions,
            "collided_vehicles": self.collided_vehicles,
            "spawned": self.spawned,
            "completed": self.completed,
            "active_at_end": self.active_at_end,
        }


def duration_of(rec: VehicleRecord) -> float | None:
    """Time from spawn until the route end (20 m past the box); None while still driving."""
    if rec.end_time is None or rec.collided:
        return None
    return rec.end_time - rec.spawn_time


def stopped(speeds, threshold: float = 0.3) -> bool:
    """True if the speed trace dips below ``threshold`` at any step."""
    return bool(np.min(speeds) < threshold) if len(speeds) else False


def controller_for(config: ScenarioConfig):
    if config.controller == "rl":
        from ..policy.controller import RLController

        if not config.weights:
            raise ValueError("controller 'rl' needs a weights file")
        return RLController.from_file(config.weights)
    return make_controller(config.controller)


class Episode:
    """One simulation run; ``step`` advances by one ``dt``.

    Kept as a class so the training environment can drive it step by step.
    """

    def __init__(self, config: ScenarioConfig, controller=None, strict: bool | None = None):
        self.config = config
        self.layout = build_layout(config.layout)
        self.world = World(self.layout, config.sim)
        self.controller = controller if controller is not None else controller_for(config)
        self.controller.reset()
        self.spawner = Spawner(self.layout, config.sim, config.demand, config.seed, config.vehicle_cap)
        self.strict = config.controller in STRICT_KINDS if strict is None else strict
        self.records: dict[int, VehicleRecord] = {}
        self.collisions = 0
        self.n_steps = int(round(config.duration / config.sim.dt))

    def step(self, overrides: dict[int, float] | None = None) -> tuple[list[int], set]:
        """Advance one step; returns (completed ids, collision pairs)."""
        w, cfg = self.world, self.config.sim
        for vid in self.spawner.step(w):
            st = w.vehicles[vid]
            self.records[vid] = VehicleRecord(vid, st.route, st.spawn_time, st.v)
        acc = self.controller.accelerations(w)
        if overrides:
            acc.update(overrides)
        new, done = {}, []
        for vid, st in w.vehicles.items():
            r = self.layout.routes[st.route]
            nxt = step_vehicle(st, acc.get(vid, 0.0), cfg.dt, cfg.limits)
            rec = self.records[vid]
            rec.min_speed = min(rec.min_speed, nxt.v)
            if nxt.s >= r.length:
                done.append(vid)
            else:
                new[vid] = nxt
        w.t = round((w.step_index + 1) * cfg.dt, 9)
        w.step_index += 1
        for vid in done:
            self.records[vid].end_time = w.t
            w.arrival.pop(vid, None)
            w.drive_off.pop(vid, None)
        w.replace_all(new)
        hits = check_collisions(w.vehicles.values(), self.layout)
        if hits:
            self.collisions += len(hits)
            for a, b in sorted(hits):
                w.log("collision", vehicles=[a, b])
            if self.strict:
                raise SafetyViolation(f"collision between vehicles {sorted(hits)} at t={w.t:.1f} under {self.config.controller}")
            for vid in sorted({v for pair in hits for v in pair}):
                self.records[vid].collided = True
                w.remove(vid)
        return done, hits

    def run(self) -> "MetricsRecord":
        for _ in range(self.n_steps):
            self.step()
        return self.metrics()

    def metrics(self) -> MetricsRecord:
        c = self.config
        durations, stops = [], []
        for rec in sorted(self.records.values(), key=lambda r: r.id):
            d = duration_of(rec)
            if d is not None:
                durations.append(d)
                stops.append(rec.min_speed < c.sim.stop_speed)
        completed = len(durations)
        return MetricsRecord(
            episode_id=f"{c.layout}-{c.controller}-{c.demand:g}-{c.seed}",
            layout=c.layout,
            controller=c.controller,
            demand=c.demand,
            seed=c.seed,
            duration=c.duration,
            flow_rate=completed / c.duration,
            durations=durations,
            stop_flags=stops,
            collisions=self.collisions,
            collided_vehicles=sum(r.collided for r in self.records.values()),
            spawned=self.spawner.spawned,
            completed=completed,
            active_at_end=len(self.world.vehicles),
        )


def run_episode(config: ScenarioConfig, controller=None) -> MetricsRecord:
    return Episode(config, controller).run()
