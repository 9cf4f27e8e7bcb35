"""Learned planner as an episode controller."""
from __future__ import annotations

import numpy as np

from ..behavior import cf_accel
from ..scenegraph import observe
from .networks import actor_forward
from .weights import NetShape, PolicyWeights, load_weights


class RLController:
    """Actor output for vehicles in the control zone, car-following elsewhere.

    With ``decision_interval`` > dt the last joint action is held for that
    long (new vehicles get a fresh decision immediately).  ``cf_cap`` limits
    each action by the car-following acceleration towards the same-lane
    leader, which keeps the learned part responsible only for the
    intersection.
    """

    name = "rl"

    def __init__(self, weights: PolicyWeights, decision_interval: float = 0.5, cf_cap: bool = True, noise=None):
        self.weights = weights
        self.decision_interval = decision_interval
        self.cf_cap = cf_cap
        self.noise = noise  # callable(vertex ids) -> perturbation, used during training
        self.reset()

    @classmethod
    def from_file(cls, path, **kw) -> "RLController":
        w = load_weights(path, NetShape())
        params = {k: w.meta[k] for k in ("decision_interval", "cf_cap") if k in w.meta}
        params.update(kw)
        return cls(w, **params)

    def reset(self) -> None:
        self._held: dict[int, float] = {}
        self._next_decision = 0.0
        self.last_graph = None
        self.last_actions = None

    def decide(self, world):
        """Fresh joint action for the current graph (stored for the trainer)."""
        graph = observe(world)
        if graph.n == 0:
            actions = np.zeros(0)
        else:
            actions, _ = actor_forward(graph, self.weights.actor, world.cfg.limits)
            if self.noise is not None:
                actions = actions + self.noise(graph.vertex_ids)
            lim = world.cfg.limits
            actions = np.clip(actions, lim.a_min, lim.a_max)
        self.last_graph, self.last_actions = graph, actions
        self._held = dict(zip(graph.vertex_ids, actions.tolist()))
        return graph, actions

    def accelerations(self, world) -> dict[int, float]:
        due = world.t + 1e-9 >= self._next_decision
        controlled = [vid for vid in world.vehicles if world.in_control_zone(vid)]
        if due or any(vid not in self._held for vid in controlled):
            self.decide(world)
            if due:
                self._next_decision = world.t + self.decision_interval
        out = {}
        for vid in world.vehicles:
            free = cf_accel(world, vid)
            if vid in self._held and world.in_control_zone(vid):
                a = self._held[vid]
                out[vid] = min(a, free) if self.cf_cap else a
            else:
                out[vid] = free
        return out
