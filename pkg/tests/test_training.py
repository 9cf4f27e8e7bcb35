import csv

import numpy as np
import pytest

from gnnaim.config import SimConfig, VehicleLimits
from gnnaim.dynamics import VehicleState
from gnnaim.geometry import build_layout
from gnnaim.policy import PolicyWeights, actor_forward, critic_forward
from gnnaim.policy.networks import batch_graphs
from gnnaim.scenegraph import observe
from gnnaim.training import (
    Adam,
    EnvConfig,
    ReplayBuffer,
    RewardSpec,
    TD3Config,
    TrainingDiverged,
    TrainingEnv,
    Transition,
    actor_update,
    compute_reward,
    config_hash,
    correspondence,
    critic_target,
    critic_update,
    td3_train,
)
from gnnaim.world import World

LIM = VehicleLimits()


def _world(vehicles):
    w = World(build_layout("M"), SimConfig())
    for vid, rid, s, v in vehicles:
        w.add(VehicleState(vid, rid, s, v))
    return w


def test_reward_free_flow_is_w_flow():
    w = _world([(1, "W_in:through", 60.0, 10.0), (2, "S_in:left", 55.0, 10.0)])
    assert compute_reward(w, {1: 0.0, 2: 0.0}, set()) == pytest.approx(1.0)


def test_reward_collision_subtracts_penalty():
    w = _world([(1, "W_in:through", 60.0, 10.0)])
    spec = RewardSpec()
    assert compute_reward(w, {1: 0.0}, {(1, 2)}, spec) == pytest.approx(1.0 - spec.w_coll)


def test_reward_scalar_oracle():
    w = _world([(1, "W_in:through", 60.0, 4.0), (2, "S_in:left", 55.0, 7.0), (3, "E_in:right", 52.0, 1.0)])
    acts = {1: 2.0, 2: -4.0, 3: 0.5}
    spec = RewardSpec(w_flow=1.5, w_act=0.3, w_coll=7.0)
    expect = 1.5 * (0.4 + 0.7 + 0.1) / 3 - 0.3 * ((2 / 3) ** 2 + (4 / 3) ** 2 + (0.5 / 3) ** 2) / 3
    assert compute_reward(w, acts, set(), spec) == pytest.approx(expect)
    assert compute_reward(w, acts, set(), spec, speeds={1: 10.0}) == pytest.approx(expect + 1.5 * 0.6 / 3)


def test_reward_needs_vehicles_and_valid_weights():
    with pytest.raises(ValueError):
        compute_reward(_world([]), {}, set())
    with pytest.raises(ValueError):
        RewardSpec(w_coll=-1.0)


def _graph(vehicles):
    return observe(_world(vehicles))


G1 = [(1, "W_in:through", 60.0, 5.0), (2, "S_in:through", 62.0, 6.0)]
G2 = [(1, "W_in:through", 63.0, 5.5), (3, "N_in:left", 51.0, 8.0)]


def _transition(r=0.5, done=False, a=None):
    s, s2 = _graph(G1), _graph(G2)
    a = np.array([1.0, -2.0]) if a is None else a
    return Transition(s, a, r, s2, done, correspondence(s, s2))


def test_transition_shapes_and_correspondence():
    t = _transition()
    assert t.id_map == {0: 0}
    with pytest.raises(ValueError):
        Transition(t.s, np.zeros(3), 0.0, t.s_next, False, {})


def test_replay_buffer_fifo_eviction_and_seeded_sampling():
    buf = ReplayBuffer(3)
    for k in range(5):
        buf.add(_transition(r=float(k)))
    assert len(buf) == 3
    assert [buf[i].r for i in range(3)] == [2.0, 3.0, 4.0]
    a = [t.r for t in buf.sample(10, np.random.default_rng(7))]
    b = [t.r for t in buf.sample(10, np.random.default_rng(7))]
    assert a == b
    with pytest.raises(ValueError):
        ReplayBuffer(0)


def test_critic_target_scalar_oracle():
    hp = TD3Config(gamma=0.9)
    tg = PolicyWeights.initial(3)
    batch = [_transition(r=0.3), _transition(r=-1.0, done=True), _transition(r=0.7)]
    y = critic_target(batch, tg, hp, np.random.default_rng(5), LIM)
    # replay the same noise draws one transition at a time
    rng = np.random.default_rng(5)
    nb = batch_graphs([t.s_next for t in batch])
    a_next, _ = actor_forward(nb, tg.actor, LIM)
    half = 0.5 * (LIM.a_max - LIM.a_min)
    noise = np.clip(rng.normal(0, hp.target_noise * half, size=a_next.shape), -hp.noise_clip * half, hp.noise_clip * half)
    a_next = np.clip(a_next + noise, LIM.a_min, LIM.a_max)
    off = 0
    for k, t in enumerate(batch):
        n = t.s_next.n
        ak = a_next[off : off + n]
        off += n
        q1, _ = critic_forward(t.s_next, ak, tg.critic1, LIM)
        q2, _ = critic_forward(t.s_next, ak, tg.critic2, LIM)
        expect = t.r + (0.0 if t.done else hp.gamma * min(float(q1[0]), float(q2[0])))
        assert y[k] == pytest.approx(expect, abs=1e-12)
    assert y[1] == -1.0


def test_critic_target_gamma_zero():
    batch = [_transition(r=0.3), _transition(r=0.1)]
    y = critic_target(batch, PolicyWeights.initial(0), TD3Config(gamma=0.0), np.random.default_rng(0), LIM)
    assert np.array_equal(y, [0.3, 0.1])


def test_critic_loss_descends_on_frozen_batch():
    rng = np.random.default_rng(0)
    vehicles = [
        [(1, "W_in:through", 55.0 + k, 5.0), (2, "S_in:through", 60.0 - k, 3.0), (3, "E_in:left", 52.0, 7.0)]
        for k in range(8)
    ]
    batch = []
    for k, vs in enumerate(vehicles):
        s = _graph(vs)
        batch.append(Transition(s, rng.uniform(-5, 3, size=s.n), float(rng.normal()), s, False, {}))
    w = PolicyWeights.initial(1)
    y = rng.normal(size=len(batch))
    o1, o2 = Adam(w.critic1, 1e-3), Adam(w.critic2, 1e-3)
    actor_before = {k: v.copy() for k, v in w.actor.items()}
    losses = [critic_update(batch, w, o1, o2, y, LIM) for _ in range(100)]
    assert losses[-1] < 0.5 * losses[0]
    assert all(np.array_equal(actor_before[k], w.actor[k]) for k in actor_before)


def test_adam_minimises_quadratic():
    p = {"x": np.array([3.0, -2.0])}
    opt = Adam(p, lr=0.1)
    for _ in range(500):
        opt.step(p, {"x": 2 * p["x"]})
    assert np.allclose(p["x"], 0.0, atol=1e-2)


def test_env_joint_action_dimension_tracks_vehicle_count():
    env = TrainingEnv(EnvConfig(demand_range=(0.3, 0.4), episode_duration=30.0), seed=2)
    env.reset(PolicyWeights.initial(0))
    seen = set()
    while not env.done():
        s, a, r, s2, term = env.step()
        if s is not None:
            assert len(a) == s.n and np.isfinite(r)
            assert np.all((a > LIM.a_min) & (a < LIM.a_max))
            seen.add(s.n)
        if term:
            break
    assert len(seen) > 1
    assert max(seen) <= EnvConfig().cap


def test_zero_steps_returns_initialisation():
    init = PolicyWeights.initial(4)
    w, rows = td3_train(EnvConfig(), TD3Config(total_steps=0), seed=4, init=init)
    assert rows == []
    for k in init.actor:
        assert np.array_equal(w.actor[k], init.actor[k])


SMALL = TD3Config(total_steps=120, start_steps=40, batch_size=16, demo_steps=60)  # demonstrations, then the actor
SMALL_ENV = EnvConfig(episode_duration=20.0)


def test_training_is_deterministic(tmp_path):
    w1, r1 = td3_train(SMALL_ENV, SMALL, seed=3, log_path=tmp_path / "a.csv")
    w2, r2 = td3_train(SMALL_ENV, SMALL, seed=3, log_path=tmp_path / "b.csv")
    assert r1 == r2
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    for part in ("actor", "critic1", "critic2"):
        for k, v in getattr(w1, part).items():
            assert np.array_equal(v, getattr(w2, part)[k])
    rows = list(csv.DictReader(open(tmp_path / "a.csv")))
    assert list(rows[0]) == ["step", "episode", "episode_return", "critic_loss", "actor_loss", "eval_flow_rate"]
    assert any(r["critic_loss"] for r in rows)


def test_training_changes_weights_and_records_meta():
    w, _ = td3_train(SMALL_ENV, SMALL, seed=0)
    init = PolicyWeights.initial(0)
    assert any(not np.array_equal(w.actor[k], init.actor[k]) for k in init.actor)
    assert w.meta["layout"] == "M" and w.meta["decision_interval"] == 0.5


def test_divergence_detector():
    w = PolicyWeights.initial(0)
    w.critic1["head.W"][:] = np.nan
    with pytest.raises(TrainingDiverged):
        td3_train(SMALL_ENV, SMALL, seed=0, init=w)


def test_evaluation_hook_is_called():
    calls = []
    hp = TD3Config(total_steps=60, start_steps=20, batch_size=8, eval_every=30)
    _, rows = td3_train(SMALL_ENV, hp, seed=1, evaluate=lambda w: calls.append(1) or 0.25)
    assert len(calls) == 2
    assert [r["eval_flow_rate"] for r in rows if r["eval_flow_rate"] != ""] == [0.25, 0.25]


def test_config_hash_sensitivity():
    a = config_hash(EnvConfig(), TD3Config(), 0)
    assert a == config_hash(EnvConfig(), TD3Config(), 0)
    assert a != config_hash(EnvConfig(), TD3Config(), 1)
    assert a != config_hash(EnvConfig(layout="S"), TD3Config(), 0)


def test_demo_episode_records_applied_accelerations():
    env = TrainingEnv(EnvConfig(demand_range=(0.3, 0.3), episode_duration=30.0), seed=1)
    env.reset(PolicyWeights.initial(0), demo="efifo")
    seen = 0
    while not env.done():
        s, a, r, s2, term = env.step()
        if s is not None:
            seen += 1
            assert len(a) == s.n and np.isfinite(r)
            assert np.all((a > LIM.a_min) & (a < LIM.a_max))
        if term:
            break
    assert seen > 10
    assert env.demo.last is not None and env.demo.name == "efifo"


def test_demo_steps_are_flagged_and_counted(monkeypatch):
    hp = TD3Config(total_steps=80, start_steps=20, batch_size=8, demo_controller="efifo", demo_steps=40, bc_weight=1.0)
    flags = []
    orig = ReplayBuffer.add
    monkeypatch.setattr(ReplayBuffer, "add", lambda self, t: (flags.append(t.demo), orig(self, t))[1])
    td3_train(SMALL_ENV, hp, seed=2)
    assert len(flags) == 80
    # the demonstration controller finishes its episode, so at least demo_steps transitions are flagged
    assert all(flags[:40]) and not flags[-1]


def test_behaviour_cloning_pulls_actor_towards_demonstrations():
    batch = []
    for k in range(6):
        s = _graph([(1, "W_in:through", 55.0 + k, 5.0), (2, "S_in:through", 60.0 - k, 3.0)])
        batch.append(Transition(s, np.array([2.0, -3.0]), 0.0, s, False, {}, True))
    w = PolicyWeights.initial(2)
    opt = Adam(w.actor, 1e-3)
    gap = lambda: float(np.mean((actor_forward(batch_graphs([t.s for t in batch]), w.actor, LIM)[0] - np.tile([2.0, -3.0], 6)) ** 2))
    before = gap()
    for _ in range(200):
        actor_update(batch, w, opt, LIM, bc_weight=100.0)
    assert gap() < 0.1 * before
