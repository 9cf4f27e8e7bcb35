"""Evaluation protocols: baseline comparison on one layout and layout cross-validation."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .episode import MetricsRecord, ScenarioConfig, run_episode

LAYOUTS = ("S", "M", "L", "XL")
BASELINES = ("tl", "fifo", "efifo", "pr")
CSV_FIELDS = (
    "episode_id",
    "layout",
    "controller",
    "model",
    "demand",
    "seed",
    "flow_rate",
    "median_duration",
    "stop_fraction",
    "collisions",
    "collided_vehicles",
    "spawned",
    "completed",
    "active_at_end",
)


def run_many(configs: list[ScenarioConfig], parallel: int = 1) -> list[MetricsRecord]:
    """Run independent episodes; results come back in input order whatever ``parallel`` is."""
    if parallel <= 1 or len(configs) <= 1:
        return [run_episode(c) for c in configs]
    with ProcessPoolExecutor(max_workers=parallel) as pool:
        return list(pool.map(run_episode, configs, chunksize=max(1, len(configs) // (4 * parallel))))


def demand_grid(lo: float, hi: float, runs: int, seed: int) -> list[tuple[float, int]]:
    """Paired (demand, episode seed) draws shared by every controller of a protocol."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    demands = rng.uniform(lo, hi, runs)
    seeds = rng.integers(0, 2**31, runs)
    return [(float(d), int(s)) for d, s in zip(demands, seeds)]


def _quartiles(x) -> dict:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return {"n": 0, "median": None, "q1": None, "q3": None}
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    return {"n": int(x.size), "median": float(med), "q1": float(q1), "q3": float(q3)}


def flow_bins(records: list[MetricsRecord], width: float = 0.1, min_episodes: int = 5) -> list[dict]:
    """Durations of all completed vehicles, grouped by the episode flow-rate bin.

    Bins with fewer than ``min_episodes`` episodes are dropped.
    """
    groups: dict[int, list[MetricsRecord]] = {}
    for rec in records:
        groups.setdefault(int(math.floor(rec.flow_rate / width + 1e-9)), []).append(rec)
    out = []
    for k in sorted(groups):
        recs = groups[k]
        if len(recs) < min_episodes:
            continue
        out.append(
            {
                "bin_low": round(k * width, 10),
                "bin_high": round((k + 1) * width, 10),
                "episodes": len(recs),
                "median_flow": float(np.median([r.flow_rate for r in recs])),
                "duration": _quartiles([d for r in recs for d in r.durations]),
            }
        )
    return out


def capacity(records: list[MetricsRecord], width: float = 0.1, min_episodes: int = 5) -> float:
    """Median flow rate of the highest populated flow bin."""
    bins = flow_bins(records, width, min_episodes)
    return bins[-1]["median_flow"] if bins else math.nan


def summarize(records: list[MetricsRecord]) -> dict:
    spawned = sum(r.spawned for r in records)
    return {
        "episodes": len(records),
        "flow_rate": _quartiles([r.flow_rate for r in records]),
        "max_flow_rate": max((r.flow_rate for r in records), default=None),
        "stop_fraction": _quartiles([r.stop_fraction for r in records]),
        "duration": _quartiles([d for r in records for d in r.durations]),
        "collision_fraction": (sum(r.collided_vehicles for r in records) / spawned) if spawned else 0.0,
        "flow_bins": flow_bins(records),
        "capacity": capacity(records),
    }


@dataclass
class ProtocolResult:
    name: str
    records: list  # list[tuple[str, MetricsRecord]]: (group label, record)
    summary: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for label, rec in self.records:
            row = rec.summary_row()
            row["model"] = label
            out.append(row)
        return out

    def write(self, out_dir) -> dict:
        """Write ``<name>.csv`` (one row per episode) and ``<name>.json`` (summary); returns the paths."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{self.name}.csv"
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
            writer.writeheader()
            writer.writerows(self.rows())
        json_path = out_dir / f"{self.name}.json"
        json_path.write_text(json.dumps(_json_safe(self.summary), indent=2, sort_keys=True), encoding="utf-8")
        return {"csv": str(csv_path), "json": str(json_path)}


def _json_safe(x):
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def baseline_protocol(
    layout: str = "L",
    controllers=BASELINES,
    demand_range=(0.05, 0.3),
    runs: int = 100,
    seed: int = 0,
    parallel: int = 1,
    weights: dict | None = None,
    duration: float = 100.0,
) -> ProtocolResult:
    """Every controller on the same ``runs`` (demand, seed) draws.

    ``weights`` maps a label to a weights file; each becomes an extra
    learned-planner entry.
    """
    grid = demand_grid(*demand_range, runs, seed)
    entries = [(c, c, None) for c in controllers] + [(label, "rl", path) for label, path in (weights or {}).items()]
    configs, labels = [], []
    for label, kind, path in entries:
        for d, s in grid:
            configs.append(ScenarioConfig(layout, kind, d, duration, s, path))
            labels.append(label)
    records = run_many(configs, parallel)
    paired = list(zip(labels, records))
    summary = {
        "layout": layout,
        "demand_range": list(demand_range),
        "runs": runs,
        "seed": seed,
        "controllers": {label: summarize([r for lb, r in paired if lb == label]) for label, _, _ in entries},
    }
    return ProtocolResult("baselines", paired, summary)


def crossval_protocol(
    models: dict,
    layouts=LAYOUTS,
    demand_range=(0.2, 0.4),
    runs: int = 100,
    seed: int = 0,
    parallel: int = 1,
    duration: float = 100.0,
) -> ProtocolResult:
    """Each model (label -> weights file) on each layout over the same scenarios.

    The summary holds two matrices indexed [model][layout]: collided vehicles
    as a percentage of spawned vehicles, and the mean flow rate.
    """
    missing = [str(p) for p in models.values() if not Path(p).is_file()]
    if missing:
        raise FileNotFoundError(f"weights file(s) not found: {', '.join(missing)}")
    grid = demand_grid(*demand_range, runs, seed)
    configs, keys = [], []
    for label, path in models.items():
        for lay in layouts:
            for d, s in grid:
                configs.append(ScenarioConfig(lay, "rl", d, duration, s, str(path)))
                keys.append((label, lay))
    records = run_many(configs, parallel)
    collision, flow = {}, {}
    for label in models:
        collision[label], flow[label] = {}, {}
        for lay in layouts:
            recs = [r for k, r in zip(keys, records) if k == (label, lay)]
            spawned = sum(r.spawned for r in recs)
            collision[label][lay] = 100.0 * sum(r.collided_vehicles for r in recs) / spawned if spawned else 0.0
            flow[label][lay] = float(np.mean([r.flow_rate for r in recs]))
    summary = {
        "models": list(models),
        "layouts": list(layouts),
        "demand_range": list(demand_range),
        "runs": runs,
        "seed": seed,
        "collision_percent": collision,
        "mean_flow_rate": flow,
    }
    return ProtocolResult("crossval", [(k[0], r) for k, r in zip(keys, records)], summary)
