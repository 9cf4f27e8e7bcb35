"""Shared physical constants and tunables.

Everything that the simulator, the controllers and the learner must agree on
lives here so that a scenario file can override it in one place.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace


@dataclass(frozen=True)
class VehicleLimits:
    a_min: float = -5.0
    a_max: float = 3.0
    v_max: float = 10.0
    length: float = 5.0
    width: float = 2.0

    @property
    def a_scale(self) -> float:
        return max(abs(self.a_min), self.a_max)


@dataclass(frozen=True)
class CfParams:
    """Car-following parameters (IDM, optionally with the drive-off extension)."""

    v0: float = 10.0
    T: float = 1.5
    s0: float = 2.0
    a: float = 3.0
    b: float = 2.0
    delta: float = 4.0
    drive_off_delay: float = 0.5
    variant: str = "EIDM"

    def __post_init__(self):
        for name in ("v0", "T", "s0", "a", "b", "delta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"car-following parameter {name} must be positive")
        if self.drive_off_delay < 0:
            raise ValueError("drive_off_delay must be non-negative")
        if self.variant not in ("IDM", "EIDM"):
            raise ValueError(f"unknown car-following variant {self.variant!r}")

    def check_limits(self, limits: VehicleLimits) -> None:
        if self.a > limits.a_max or self.b > abs(limits.a_min):
            raise ValueError("car-following accelerations exceed vehicle limits")


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1
    limits: VehicleLimits = field(default_factory=VehicleLimits)
    cf: CfParams = field(default_factory=CfParams)
    stop_speed: float = 0.3
    spawn_shift: float = 1.0
    # half-width used when dilating paths for conflict detection
    conflict_half_width: float = 1.25
    # mahalanobis ellipse of the pair distance feature
    sigma_lon: float = 10.0
    sigma_lat: float = 2.0
    inv_dist_clip: float = 10.0
    # priority-rule gap acceptance margin
    pr_margin: float = 2.0
    # turn shares on lanes serving several movements
    turn_weights: dict = field(default_factory=lambda: {"through": 2.0, "left": 1.0, "right": 1.0})

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        self.cf.check_limits(self.limits)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict | None) -> "SimConfig":
        data = dict(data or {})
        limits = VehicleLimits(**data.pop("limits", {}))
        cf = CfParams(**data.pop("cf", {}))
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown simulation keys: {sorted(unknown)}")
        return cls(limits=limits, cf=cf, **data)

    def with_(self, **changes) -> "SimConfig":
        return replace(self, **changes)
