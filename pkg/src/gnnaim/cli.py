"""Command-line entry point: ``gnnaim {simulate,train,benchmark,export}``.

Every option can also come from a YAML/JSON file given with ``--config``
(keys equal the long option names with dashes replaced by underscores);
explicit flags win.  A run manifest written by a previous run is accepted
as a config file, which reproduces that run.

Outputs go to ``--out`` or, by default, to a directory named after the
command and a hash of the effective configuration below ``$GNNAIM_OUT``
(default ``./runs``).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .config import SimConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SAFETY = 3
EXIT_DIVERGED = 4

log = logging.getLogger("gnnaim")

DEFAULTS = {
    "simulate": {
        "layout": "L",
        "controller": "tl",
        "demand": 0.15,
        "duration": 100.0,
        "seed": 0,
        "episodes": 1,
        "weights": None,
        "parallel": None,
        "sim": {},
    },
    "train": {
        "layout": "M",
        "seed": 0,
        "steps": 50_000,
        "init": None,
        "demand_range": [0.1, 0.4],
        "eval_every": 0,
        "eval_episodes": 5,
        "eval_demand": 0.3,
        "td3": {},
        "reward": {},
        "sim": {},
    },
    "benchmark": {
        "protocol": "baselines",
        "layout": "L",
        "controllers": ["tl", "fifo", "efifo", "pr"],
        "weights": {},
        "runs": 100,
        "seed": 0,
        "demand_range": None,
        "parallel": None,
        "duration": 100.0,
    },
    "export": {
        "what": "weights",
        "weights": None,
        "layout": "L",
        "controller": "tl",
        "demand": 0.15,
        "seed": 0,
        "duration": 100.0,
        "every": 10,
    },
}


class ConfigError(ValueError):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    artifacts: dict = field(default_factory=dict)
    version: str = __version__
    python: str = platform.python_version()
    numpy: str = np.__version__
    started: str = ""
    wall_seconds: float = 0.0

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True), encoding="utf-8")
        return path


# -- configuration -------------------------------------------------------------------


def _weights_pairs(values) -> dict:
    out = {}
    for item in values or []:
        if "=" not in item:
            raise ConfigError(f"expected LABEL=PATH, got {item!r}")
        label, path = item.split("=", 1)
        out[label] = path
    return out


def effective_config(command: str, args: argparse.Namespace) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    if args.config:
        try:
            loaded = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if "command" in loaded and "config" in loaded:  # a run manifest
            if loaded["command"] != command:
                raise ConfigError(f"manifest belongs to {loaded['command']!r}, not {command!r}")
            loaded = loaded["config"]
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key in cfg:
        val = getattr(args, key, None)
        if val is None:
            continue
        if key == "weights" and command == "benchmark":
            val = _weights_pairs(val)
        cfg[key] = val
    return cfg


def out_dir_for(command: str, cfg: dict, args) -> Path:
    if args.out:
        return Path(args.out)
    digest = hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:10]
    return Path(os.environ.get("GNNAIM_OUT", "runs")) / f"{command}-{digest}"


def _parallel(value) -> int:
    return int(value) if value else (os.cpu_count() or 1)


# -- commands ----------------------------------------------------------------------------


def cmd_simulate(cfg: dict, out: Path) -> dict:
    from .harness.episode import ScenarioConfig
    from .harness.protocols import ProtocolResult, run_many, summarize

    sim = SimConfig.from_dict(cfg["sim"])
    configs = [
        ScenarioConfig(cfg["layout"], cfg["controller"], float(cfg["demand"]), float(cfg["duration"]), int(cfg["seed"]) + k, cfg["weights"], None, sim)
        for k in range(int(cfg["episodes"]))
    ]
    if cfg["controller"] == "rl":
        _require_file(cfg["weights"])
    records = run_many(configs, _parallel(cfg["parallel"]))
    result = ProtocolResult("episodes", [(cfg["controller"], r) for r in records], summarize(records))
    paths = result.write(out)
    durations = out / "durations.csv"
    with open(durations, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["episode_id", "duration", "stopped"])
        for r in records:
            for d, s in zip(r.durations, r.stop_flags):
                w.writerow([r.episode_id, repr(d), int(s)])
    paths["durations"] = str(durations)
    return paths


def cmd_train(cfg: dict, out: Path) -> dict:
    from .plotting import plot_training_log
    from .policy.weights import load_weights, save_weights
    from .training import EnvConfig, RewardSpec, TD3Config, evaluate_policy, td3_train

    if cfg["layout"] not in ("S", "M", "L", "XL"):
        raise ConfigError(f"unknown layout {cfg['layout']!r}")
    sim = SimConfig.from_dict(cfg["sim"])
    try:
        reward = RewardSpec(**cfg["reward"])
        hp = TD3Config(total_steps=int(cfg["steps"]), eval_every=int(cfg["eval_every"]), **cfg["td3"])
    except TypeError as exc:
        raise ConfigError(f"bad td3 or reward options: {exc}") from exc
    env = EnvConfig(layout=cfg["layout"], demand_range=tuple(cfg["demand_range"]), reward=reward, sim=sim)
    # the manifest records every resolved hyperparameter, so later default changes cannot alter a rerun
    cfg["td3"] = {k: v for k, v in asdict(hp).items() if k not in ("total_steps", "eval_every")}
    cfg["reward"] = asdict(reward)
    init = None
    if cfg["init"]:
        init = load_weights(_require_file(cfg["init"]))
    evaluate = None
    if hp.eval_every:
        evaluate = lambda w: evaluate_policy(w, cfg["layout"], float(cfg["eval_demand"]), int(cfg["eval_episodes"]), int(cfg["seed"]), sim)[0]
    out.mkdir(parents=True, exist_ok=True)
    weights, rows = td3_train(env, hp, int(cfg["seed"]), init=init, log_path=out / "train_log.csv", evaluate=evaluate)
    paths = {"weights": str(save_weights(out / "weights.bin", weights)), "log": str(out / "train_log.csv")}
    paths["figure"] = plot_training_log(rows, out / "training.png")
    return paths


def cmd_benchmark(cfg: dict, out: Path) -> dict:
    from .harness.protocols import baseline_protocol, crossval_protocol
    from .plotting import plot_baselines, plot_crossval

    par = _parallel(cfg["parallel"])
    if cfg["protocol"] == "baselines":
        for p in cfg["weights"].values():
            _require_file(p)
        dr = tuple(cfg["demand_range"] or (0.05, 0.3))
        res = baseline_protocol(cfg["layout"], tuple(cfg["controllers"]), dr, int(cfg["runs"]), int(cfg["seed"]), par, cfg["weights"], float(cfg["duration"]))
        paths = res.write(out)
        paths["figures"] = plot_baselines(res, out)
    elif cfg["protocol"] == "crossval":
        if not cfg["weights"]:
            raise ConfigError("crossval needs --weights LABEL=PATH for each model")
        for p in cfg["weights"].values():
            _require_file(p)
        dr = tuple(cfg["demand_range"] or (0.2, 0.4))
        res = crossval_protocol(cfg["weights"], demand_range=dr, runs=int(cfg["runs"]), seed=int(cfg["seed"]), parallel=par, duration=float(cfg["duration"]))
        paths = res.write(out)
        paths["figures"] = plot_crossval(res, out)
    else:
        raise ConfigError(f"unknown protocol {cfg['protocol']!r}; choose baselines or crossval")
    return paths


def cmd_export(cfg: dict, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    if cfg["what"] == "weights":
        from .policy.weights import load_weights

        w = load_weights(_require_file(cfg["weights"]))
        path = out / "weights.json"
        data = {"meta": w.meta, "tensors": {k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in sorted(w.flat().items())}}
        path.write_text(json.dumps(data), encoding="utf-8")
        return {"weights_json": str(path)}
    if cfg["what"] == "graphs":
        from .harness.episode import Episode, ScenarioConfig
        from .scenegraph import build_graph

        ep = Episode(ScenarioConfig(cfg["layout"], cfg["controller"], float(cfg["demand"]), float(cfg["duration"]), int(cfg["seed"]), cfg["weights"]))
        path = out / "graphs.jsonl"
        every = max(1, int(cfg["every"]))
        with open(path, "w", encoding="utf-8") as fh:
            for k in range(ep.n_steps):
                ep.step()
                if k % every == 0:
                    fh.write(json.dumps({"t": ep.world.t, "graph": build_graph(ep.world).to_dict()}) + "\n")
        return {"graphs": str(path)}
    raise ConfigError(f"unknown export target {cfg['what']!r}; choose weights or graphs")


def _require_file(path) -> str:
    if not path or not Path(path).is_file():
        raise ConfigError(f"weights file not found: {path}")
    return str(path)


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "benchmark": cmd_benchmark, "export": cmd_export}


# -- argument parsing -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gnnaim", description="Cooperative intersection management simulator and graph policy trainer.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML/JSON config or a run manifest")
        sp.add_argument("--out", help="output directory (default: $GNNAIM_OUT/<command>-<hash>)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--layout", choices=["S", "M", "L", "XL"])
        sp.add_argument("-v", "--verbose", action="store_true")

    s = sub.add_parser("simulate", help="run episodes and write per-episode metrics")
    common(s)
    s.add_argument("--controller", choices=["cf", "tl", "fifo", "efifo", "pr", "rl"])
    s.add_argument("--demand", type=float, help="vehicles/s per main-road lane")
    s.add_argument("--duration", type=float)
    s.add_argument("--episodes", type=int)
    s.add_argument("--weights", help="weights file for --controller rl")
    s.add_argument("--parallel", type=int)

    t = sub.add_parser("train", help="train the graph policy with TD3")
    common(t)
    t.add_argument("--steps", type=int)
    t.add_argument("--init", help="warm-start weights file")
    t.add_argument("--demand-range", type=float, nargs=2, dest="demand_range")
    t.add_argument("--eval-every", type=int, dest="eval_every")

    b = sub.add_parser("benchmark", help="run an evaluation protocol")
    common(b)
    b.add_argument("protocol", nargs="?", choices=["baselines", "crossval"])
    b.add_argument("--controllers", nargs="+", choices=["tl", "fifo", "efifo", "pr", "cf"])
    b.add_argument("--weights", nargs="+", metavar="LABEL=PATH")
    b.add_argument("--runs", type=int)
    b.add_argument("--demand-range", type=float, nargs=2, dest="demand_range")
    b.add_argument("--parallel", type=int)
    b.add_argument("--duration", type=float)

    e = sub.add_parser("export", help="export weights or scene graphs as JSON")
    common(e)
    e.add_argument("what", nargs="?", choices=["weights", "graphs"])
    e.add_argument("--weights")
    e.add_argument("--controller", choices=["cf", "tl", "fifo", "efifo", "pr", "rl"])
    e.add_argument("--demand", type=float)
    e.add_argument("--duration", type=float)
    e.add_argument("--every", type=int, help="export every n-th step")
    return p


def main(argv=None) -> int:
    from .harness.episode import SafetyViolation
    from .policy.weights import WeightsError
    from .training import TrainingDiverged

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    t0 = time.perf_counter()
    try:
        cfg = effective_config(args.command, args)
        out = out_dir_for(args.command, cfg, args)
        out.mkdir(parents=True, exist_ok=True)
        artifacts = COMMANDS[args.command](cfg, out)
    except (ConfigError, ValueError, FileNotFoundError, WeightsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SafetyViolation as exc:
        print(f"safety violation: {exc}", file=sys.stderr)
        return EXIT_SAFETY
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    manifest = RunManifest(args.command, cfg, int(cfg.get("seed", 0)), artifacts, started=started, wall_seconds=round(time.perf_counter() - t0, 3))
    artifacts["manifest"] = str(manifest.write(out))
    print(json.dumps(artifacts, indent=2))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
