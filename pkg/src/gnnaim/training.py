"""TD3 training of the graph policy.

The environment advances the simulator by one decision interval per step.
All vehicles in the control zone form one joint action; reward and Q value
are joint as well, so transitions need no per-vehicle matching.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import SimConfig
from .harness.episode import Episode, ScenarioConfig
from .policy.controller import RLController
from .policy.networks import actor_backward, actor_forward, batch_graphs, critic_backward, critic_forward
from .policy.weights import PolicyWeights
from .baselines import make_controller
from .scenegraph import SceneGraph, observe

log = logging.getLogger(__name__)

VEHICLE_CAPS = {"S": 8, "M": 12, "L": 18, "XL": 24}


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class RewardSpec:
    w_flow: float = 1.0
    w_act: float = 0.1
    w_coll: float = 10.0
    terminal_on_collision: bool = True

    def __post_init__(self):
        if min(self.w_flow, self.w_act, self.w_coll) < 0:
            raise ValueError("reward weights must be non-negative")


@dataclass(frozen=True)
class TD3Config:
    gamma: float = 0.95
    tau: float = 0.005
    policy_delay: int = 2
    target_noise: float = 0.2  # fraction of the half action range
    noise_clip: float = 0.5
    explore_noise: float = 0.1  # stationary std as a fraction of the half action range
    explore_kind: str = "gaussian"  # gaussian | ou (per-vehicle Ornstein-Uhlenbeck, correlated over decisions)
    ou_theta: float = 0.15  # OU mean reversion per decision
    batch_size: int = 64
    buffer_size: int = 100_000
    lr: float = 3e-4
    total_steps: int = 50_000
    start_steps: int = 1_000  # uniform random actions before the actor takes over
    eval_every: int = 0  # environment steps between evaluation episodes; 0 disables
    pre_tanh_penalty: float = 1e-2  # hinge on decoder outputs beyond +-pre_tanh_free, keeps tanh out of saturation
    pre_tanh_free: float = 2.5
    demo_controller: str = "efifo"  # baseline that drives the first demo_steps environment steps ("" disables)
    demo_steps: int = 3_000
    bc_weight: float = 0.5  # weight of the behaviour-cloning term on demonstration transitions

    def __post_init__(self):
        if self.explore_kind not in ("gaussian", "ou"):
            raise ValueError(f"unknown exploration noise {self.explore_kind!r}; choose gaussian or ou")
        if self.demo_controller and self.demo_controller not in ("cf", "tl", "fifo", "efifo", "pr"):
            raise ValueError(f"unknown demonstration controller {self.demo_controller!r}")
        if min(self.demo_steps, self.bc_weight, self.total_steps) < 0:
            raise ValueError("demo_steps, bc_weight and total_steps must be non-negative")


@dataclass(frozen=True)
class EnvConfig:
    layout: str = "M"
    demand_range: tuple = (0.1, 0.4)
    episode_duration: float = 100.0
    vehicle_cap: int | None = None
    decision_interval: float = 0.5
    cf_cap: bool = True
    reward: RewardSpec = field(default_factory=RewardSpec)
    sim: SimConfig = field(default_factory=SimConfig)

    @property
    def cap(self) -> int:
        return self.vehicle_cap if self.vehicle_cap is not None else VEHICLE_CAPS[self.layout]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sim"] = self.sim.to_dict()
        d["demand_range"] = list(self.demand_range)
        return d


def config_hash(env: EnvConfig, hp: TD3Config, seed: int, extra: dict | None = None) -> str:
    blob = json.dumps({"env": env.to_dict(), "td3": asdict(hp), "seed": seed, **(extra or {})}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- data ---------------------------------------------------------------------


@dataclass(frozen=True)
class Transition:
    s: SceneGraph
    a: np.ndarray  # one action per vertex of s, in vertex order
    r: float
    s_next: SceneGraph
    done: bool
    id_map: dict  # vertex index in s -> vertex index in s_next, for vehicles present in both
    demo: bool = False  # actions came from a demonstration controller

    def __post_init__(self):
        if len(self.a) != self.s.n:
            raise ValueError("one action per vertex required")


def correspondence(s: SceneGraph, s_next: SceneGraph) -> dict:
    idx = {vid: k for k, vid in enumerate(s_next.vertex_ids)}
    return {k: idx[vid] for k, vid in enumerate(s.vertex_ids) if vid in idx}


class ReplayBuffer:
    """Fixed-capacity FIFO store with uniform sampling."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._data: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._data)

    def add(self, t: Transition) -> None:
        self._data.append(t)

    def sample(self, n: int, rng: np.random.Generator) -> list:
        idx = rng.integers(0, len(self._data), size=n)
        return [self._data[i] for i in idx]

    def __getitem__(self, k):
        return self._data[k]


def compute_reward(world, actions: dict, collisions, spec: RewardSpec = RewardSpec(), speeds: dict | None = None) -> float:
    """Flow term minus action effort minus collision penalty, for the vehicles that acted."""
    if not actions:
        raise ValueError("reward needs at least one acting vehicle")
    cfg = world.cfg
    speeds = speeds or {}
    v = np.array([speeds[vid] if vid in speeds else world.vehicles[vid].v for vid in actions])
    a = np.array(list(actions.values()), dtype=float)
    r = spec.w_flow * float(np.mean(v / cfg.cf.v0)) - spec.w_act * float(np.mean((a / cfg.limits.a_max) ** 2))
    if collisions:
        r -= spec.w_coll
    return r


# -- exploration -----------------------------------------------------------------------


class GaussianNoise:
    def __init__(self, rng: np.random.Generator, std: float):
        self.rng, self.std = rng, std

    def __call__(self, vertex_ids) -> np.ndarray:
        return self.rng.normal(0.0, self.std, size=len(vertex_ids))


class OUNoise:
    """Per-vehicle Ornstein-Uhlenbeck process with stationary standard deviation ``std``.

    Each vehicle keeps its own state from decision to decision, so a push
    in one direction persists for about ``1/theta`` decisions.  New vehicles
    start from a stationary draw; vehicles that left are forgotten.
    """

    def __init__(self, rng: np.random.Generator, std: float, theta: float):
        if not 0.0 < theta <= 1.0:
            raise ValueError("theta must be in (0, 1]")
        self.rng, self.std, self.theta = rng, std, theta
        self.innovation = std * math.sqrt(1.0 - (1.0 - theta) ** 2)
        self.state: dict = {}

    def __call__(self, vertex_ids) -> np.ndarray:
        out = np.empty(len(vertex_ids))
        state = {}
        for k, vid in enumerate(vertex_ids):
            if vid in self.state:
                x = (1.0 - self.theta) * self.state[vid] + self.rng.normal(0.0, self.innovation)
            else:
                x = self.rng.normal(0.0, self.std)
            state[vid] = out[k] = x
        self.state = state
        return out


def make_noise(hp: "TD3Config", rng: np.random.Generator, half: float):
    if hp.explore_kind == "gaussian":
        return GaussianNoise(rng, hp.explore_noise * half)
    if hp.explore_kind == "ou":
        return OUNoise(rng, hp.explore_noise * half, hp.ou_theta)
    raise ValueError(f"unknown exploration noise {hp.explore_kind!r}")


# -- environment -----------------------------------------------------------------------


class _Recorder:
    """Controller wrapper that keeps the last acceleration command."""

    def __init__(self, inner):
        self.inner, self.name, self.last = inner, inner.name, {}

    def reset(self) -> None:
        self.inner.reset()
        self.last = {}

    def accelerations(self, world) -> dict:
        self.last = self.inner.accelerations(world)
        return self.last


class TrainingEnv:
    def __init__(self, cfg: EnvConfig, seed: int):
        self.cfg = cfg
        self.demo = None
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        self.episode = None
        self.controller = None
        self.episodes_started = 0

    def reset(self, weights: PolicyWeights, noise=None, demo: str = "") -> None:
        """Start an episode; with ``demo`` set, that baseline controller drives it instead of the actor."""
        c = self.cfg
        demand = float(self.rng.uniform(*c.demand_range))
        seed = int(self.rng.integers(2**31))
        self.controller = RLController(weights, c.decision_interval, c.cf_cap, noise)
        self.demo = _Recorder(make_controller(demo)) if demo else None
        sc = ScenarioConfig(c.layout, "rl", demand, c.episode_duration, seed, None, c.cap, c.sim)
        self.episode = Episode(sc, controller=self.demo or self.controller, strict=False)
        self.episodes_started += 1

    @property
    def world(self):
        return self.episode.world

    def done(self) -> bool:
        return self.episode.world.step_index >= self.episode.n_steps

    def step(self, actions_override=None):
        """Decide, then simulate one decision interval.

        Returns ``(graph, actions, reward, next_graph, terminal)``; graph is
        None when no vehicle was in the control zone.
        """
        if self.demo is not None:
            return self._demo_step()
        ep, ctrl = self.episode, self.controller
        graph, actions = ctrl.decide(ep.world)
        if actions_override is not None and graph.n:
            actions = np.asarray(actions_override(graph.n), dtype=float)
            ctrl._held = dict(zip(graph.vertex_ids, actions.tolist()))
        ctrl._next_decision = ep.world.t + self.cfg.decision_interval
        n_sub = max(1, int(round(self.cfg.decision_interval / self.cfg.sim.dt)))
        speeds, collided = {}, False
        acting = set(graph.vertex_ids)
        for _ in range(n_sub):
            before = {vid: st.v for vid, st in ep.world.vehicles.items() if vid in acting}
            done_ids, hits = ep.step()
            for vid in done_ids:
                if vid in acting:
                    speeds[vid] = before.get(vid, 0.0)
            if hits:
                collided = True
                for pair in hits:
                    for vid in pair:
                        if vid in acting:
                            speeds[vid] = 0.0
                if self.cfg.reward.terminal_on_collision:
                    break
            if self.done():
                break
        if graph.n == 0:
            return None, actions, 0.0, None, collided and self.cfg.reward.terminal_on_collision
        nxt = observe(ep.world)
        r = compute_reward(ep.world, dict(zip(graph.vertex_ids, actions.tolist())), collided, self.cfg.reward, speeds)
        return graph, actions, r, nxt, collided and self.cfg.reward.terminal_on_collision

    def _demo_step(self):
        """One decision interval under the demonstration controller.

        The recorded action of a vehicle is its mean applied acceleration over
        the interval, clipped strictly inside the action range.
        """
        ep = self.episode
        graph = observe(ep.world)
        lim = self.cfg.sim.limits
        n_sub = max(1, int(round(self.cfg.decision_interval / self.cfg.sim.dt)))
        applied = {vid: [] for vid in graph.vertex_ids}
        speeds, collided = {}, False
        for _ in range(n_sub):
            before = {vid: st.v for vid, st in ep.world.vehicles.items() if vid in applied}
            done_ids, hits = ep.step()
            for vid in before:
                applied[vid].append(self.demo.last.get(vid, 0.0))
            for vid in done_ids:
                if vid in applied:
                    speeds[vid] = before[vid]
            if hits:
                collided = True
                for pair in hits:
                    for vid in pair:
                        if vid in applied:
                            speeds[vid] = 0.0
                if self.cfg.reward.terminal_on_collision:
                    break
            if self.done():
                break
        terminal = collided and self.cfg.reward.terminal_on_collision
        if graph.n == 0:
            return None, np.zeros(0), 0.0, None, terminal
        eps = 1e-6 * (lim.a_max - lim.a_min)
        actions = np.array([np.mean(applied[vid]) if applied[vid] else 0.0 for vid in graph.vertex_ids])
        actions = np.clip(actions, lim.a_min + eps, lim.a_max - eps)
        nxt = observe(ep.world)
        r = compute_reward(ep.world, dict(zip(graph.vertex_ids, actions.tolist())), collided, self.cfg.reward, speeds)
        return graph, actions, r, nxt, terminal


# -- optimisation -------------------------------------------------------------------------


class Adam:
    def __init__(self, params: dict, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def soft_update(target: dict, source: dict, tau: float) -> None:
    for k, v in source.items():
        target[k] *= 1.0 - tau
        target[k] += tau * v


def critic_target(batch: list, targets: PolicyWeights, hp: TD3Config, rng: np.random.Generator, limits) -> np.ndarray:
    """TD3 regression targets ``r + gamma * (1 - done) * min(Q1', Q2')`` at smoothed target actions."""
    r = np.array([t.r for t in batch])
    done = np.array([t.done for t in batch], dtype=float)
    nb = batch_graphs([t.s_next if t.s_next is not None else _EMPTY for t in batch])
    if nb.n == 0 or hp.gamma == 0.0:
        return r.copy()
    a_next, _ = actor_forward(nb, targets.actor, limits)
    half = 0.5 * (limits.a_max - limits.a_min)
    noise = np.clip(rng.normal(0.0, hp.target_noise * half, size=a_next.shape), -hp.noise_clip * half, hp.noise_clip * half)
    a_next = np.clip(a_next + noise, limits.a_min, limits.a_max)
    q1, _ = critic_forward(nb, a_next, targets.critic1, limits)
    q2, _ = critic_forward(nb, a_next, targets.critic2, limits)
    return r + hp.gamma * (1.0 - done) * np.minimum(q1, q2)


def _empty_graph():
    from .scenegraph import empty_graph

    return empty_graph()


_EMPTY = _empty_graph()


def critic_update(batch, weights: PolicyWeights, opt1: Adam, opt2: Adam, y: np.ndarray, limits) -> float:
    sb = batch_graphs([t.s for t in batch])
    a = np.concatenate([t.a for t in batch])
    loss = 0.0
    for params, opt in ((weights.critic1, opt1), (weights.critic2, opt2)):
        q, cache = critic_forward(sb, a, params, limits)
        err = q - y
        loss += float(np.mean(err**2))
        grads, _ = critic_backward(2.0 * err / len(batch), cache, params)
        opt.step(params, grads)
    return loss


def actor_update(
    batch, weights: PolicyWeights, opt: Adam, limits, pre_tanh_penalty: float = 0.0, pre_tanh_free: float = 0.0, bc_weight: float = 0.0
) -> float:
    """One gradient step on ``-mean Q1(s, actor(s))`` plus a squared hinge on the decoder output; returns the Q part.

    The hinge ``pre_tanh_penalty * mean(max(|z| - pre_tanh_free, 0)**2)`` only
    acts where tanh is nearly flat, so it does not bias actions inside the range.

    With ``bc_weight`` > 0 the Q term is divided by the batch mean of ``|Q|``
    and ``bc_weight * mean(((actor(s) - a) / half range)**2)`` over the
    vertices of demonstration transitions is added (TD3+BC style).
    """
    sb = batch_graphs([t.s for t in batch])
    a, acache = actor_forward(sb, weights.actor, limits)
    q, ccache = critic_forward(sb, a, weights.critic1, limits)
    scale = 1.0
    if bc_weight:
        scale = 1.0 / max(float(np.mean(np.abs(q))), 1e-6)
    _, da = critic_backward(-scale * np.ones(len(batch)) / len(batch), ccache, weights.critic1)
    if bc_weight:
        mask = np.concatenate([np.full(t.s.n, t.demo) for t in batch])
        if mask.any():
            target = np.concatenate([t.a for t in batch])
            half = 0.5 * (limits.a_max - limits.a_min)
            da = da + np.where(mask, 2.0 * bc_weight * (a - target) / half**2 / mask.sum(), 0.0)
    z = acache[4]
    excess = z - np.clip(z, -pre_tanh_free, pre_tanh_free)
    d_pre = 2.0 * pre_tanh_penalty * excess / len(z) if pre_tanh_penalty else None
    grads, _, _ = actor_backward(da, acache, weights.actor, d_pre)
    opt.step(weights.actor, grads)
    return -float(np.mean(q))


LOG_FIELDS = ("step", "episode", "episode_return", "critic_loss", "actor_loss", "eval_flow_rate")


def td3_train(
    env_cfg: EnvConfig = EnvConfig(),
    hp: TD3Config = TD3Config(),
    seed: int = 0,
    init: PolicyWeights | None = None,
    log_path=None,
    evaluate=None,
):
    """Train and return ``(weights, log_rows)``.

    ``init`` warm-starts from existing weights (e.g. a model trained on a
    smaller layout).  ``evaluate(weights) -> flow rate`` is called every
    ``hp.eval_every`` steps when given.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    weights = init.copy() if init is not None else PolicyWeights.initial(seed)
    weights.meta.update({"decision_interval": env_cfg.decision_interval, "cf_cap": env_cfg.cf_cap, "layout": env_cfg.layout, "seed": seed})
    targets = weights.copy()
    limits = env_cfg.sim.limits
    half = 0.5 * (limits.a_max - limits.a_min)
    opt_a = Adam(weights.actor, hp.lr)
    opt_c1 = Adam(weights.critic1, hp.lr)
    opt_c2 = Adam(weights.critic2, hp.lr)
    buffer = ReplayBuffer(hp.buffer_size)
    env = TrainingEnv(env_cfg, seed)
    rows: list[dict] = []
    writer = None
    fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(log_path, "w", newline="", encoding="utf-8")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()

    uniform = lambda n: rng.uniform(limits.a_min, limits.a_max, size=n)
    step = updates = 0
    ep_return, c_losses, a_losses = 0.0, [], []
    try:
        demo = lambda: hp.demo_controller if step < hp.demo_steps else ""
        if hp.total_steps > 0:
            env.reset(weights, make_noise(hp, rng, half), demo())
        while step < hp.total_steps:
            override = uniform if step < hp.start_steps and env.demo is None else None
            s, a, r, s_next, terminal = env.step(override)
            if s is not None:
                buffer.add(Transition(s, a, r, s_next, terminal, correspondence(s, s_next), env.demo is not None))
                step += 1
                ep_return += r
                if len(buffer) >= hp.batch_size and step >= min(hp.start_steps, hp.total_steps):
                    batch = buffer.sample(hp.batch_size, rng)
                    y = critic_target(batch, targets, hp, rng, limits)
                    c_losses.append(critic_update(batch, weights, opt_c1, opt_c2, y, limits))
                    updates += 1
                    if updates % hp.policy_delay == 0:
                        a_losses.append(actor_update(batch, weights, opt_a, limits, hp.pre_tanh_penalty, hp.pre_tanh_free, hp.bc_weight))
                        soft_update(targets.actor, weights.actor, hp.tau)
                        soft_update(targets.critic1, weights.critic1, hp.tau)
                        soft_update(targets.critic2, weights.critic2, hp.tau)
                    if not (math.isfinite(c_losses[-1]) and (not a_losses or math.isfinite(a_losses[-1]))):
                        raise TrainingDiverged(
                            f"non-finite loss at step {step}: critic={c_losses[-1]}, actor={a_losses[-1] if a_losses else None}"
                        )
                eval_flow = ""
                if evaluate is not None and hp.eval_every and step % hp.eval_every == 0:
                    eval_flow = evaluate(weights)
                    rows.append(_row(step, env.episodes_started, "", c_losses, a_losses, eval_flow))
                    if writer:
                        writer.writerow(rows[-1])
            if terminal or env.done():
                rows.append(_row(step, env.episodes_started, ep_return, c_losses, a_losses, ""))
                if writer:
                    writer.writerow(rows[-1])
                    fh.flush()
                ep_return, c_losses, a_losses = 0.0, [], []
                if step < hp.total_steps:
                    env.reset(weights, make_noise(hp, rng, half), demo())
    finally:
        if fh:
            fh.close()
    return weights, rows


def _row(step, episode, ret, c_losses, a_losses, eval_flow) -> dict:
    return {
        "step": step,
        "episode": episode,
        "episode_return": ret if ret == "" else round(float(ret), 10),
        "critic_loss": round(float(np.mean(c_losses)), 10) if c_losses else "",
        "actor_loss": round(float(np.mean(a_losses)), 10) if a_losses else "",
        "eval_flow_rate": eval_flow,
    }


def evaluation_seeds(episodes: int, seed: int = 0) -> list[int]:
    """Episode seeds used by :func:`evaluate_policy`, so baselines can be run on the same scenarios."""
    return [int(x) for x in np.random.SeedSequence([seed, 3]).generate_state(episodes)]


def evaluate_policy(weights: PolicyWeights, layout: str = "M", demand: float = 0.3, episodes: int = 10, seed: int = 0, sim: SimConfig | None = None):
    """Noise-free evaluation; returns (median flow rate, collided fraction of spawned vehicles)."""
    sim = sim or SimConfig()
    flows, collided, spawned = [], 0, 0
    for ep_seed in evaluation_seeds(episodes, seed):
        ctrl = RLController(weights, weights.meta.get("decision_interval", 0.5), weights.meta.get("cf_cap", True))
        m = Episode(ScenarioConfig(layout, "rl", demand, 100.0, ep_seed, None, None, sim), controller=ctrl, strict=False).run()
        flows.append(m.flow_rate)
        collided += m.collided_vehicles
        spawned += m.spawned
    return float(np.median(flows)), (collided / spawned if spawned else 0.0)
