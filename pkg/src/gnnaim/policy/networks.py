"""Graph actor and critic networks.

Actor: per-vertex encoder, edge encoder, an edge-feature relational layer,
a plain relational layer and a tanh decoder scaled to the acceleration
range.  Critic: the same trunk on vertex features extended by the (scaled)
action, a per-vertex head and a mean over the vertices of each graph.

Several graphs can be evaluated at once as one disjoint union
(:class:`GraphBatch`); since messages never cross graph boundaries and the
critic averages per graph, this is identical to evaluating them one by one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..config import VehicleLimits
from ..scenegraph import EdgeType, SceneGraph
from . import layers as L

N_REL = len(EdgeType)
REL_NAMES = tuple(e.name for e in EdgeType)


@dataclass(frozen=True)
class NetShape:
    vertex_in: int = 3
    edge_in: int = 2
    hidden: int = 64
    edge_hidden: int = 32
    conv_hidden: int = 64


@dataclass(frozen=True)
class GraphBatch:
    h: np.ndarray
    g: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    etype: np.ndarray
    seg: np.ndarray  # graph index of every vertex
    n_graphs: int

    @property
    def n(self) -> int:
        return self.h.shape[0]


def batch_graphs(graphs) -> GraphBatch:
    graphs = list(graphs)
    hs, gs, srcs, dsts, types, segs = [], [], [], [], [], []
    offset = 0
    for k, gr in enumerate(graphs):
        hs.append(gr.h)
        gs.append(gr.g)
        srcs.append(gr.src + offset)
        dsts.append(gr.dst + offset)
        types.append(gr.etype)
        segs.append(np.full(gr.n, k, dtype=np.int64))
        offset += gr.n
    cat = lambda xs, shape: np.concatenate(xs) if xs else np.zeros(shape)
    return GraphBatch(
        h=cat(hs, (0, 3)).reshape(-1, graphs[0].h.shape[1] if graphs else 3),
        g=cat(gs, (0, 2)).reshape(-1, 2),
        src=cat(srcs, 0).astype(np.int64),
        dst=cat(dsts, 0).astype(np.int64),
        etype=cat(types, 0).astype(np.int64),
        seg=cat(segs, 0).astype(np.int64),
        n_graphs=len(graphs),
    )


def as_batch(graph) -> GraphBatch:
    return graph if isinstance(graph, GraphBatch) else batch_graphs([graph])


# -- parameters ---------------------------------------------------------------


def _glorot(rng, out_dim, in_dim):
    lim = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-lim, lim, size=(out_dim, in_dim))


def _trunk_params(rng, shape: NetShape, vertex_in: int) -> dict:
    p = {
        "v_enc.W": _glorot(rng, shape.hidden, vertex_in),
        "v_enc.b": np.zeros(shape.hidden),
        "e_enc.W": _glorot(rng, shape.edge_hidden, shape.edge_in),
        "e_enc.b": np.zeros(shape.edge_hidden),
        "conv1.W0": _glorot(rng, shape.conv_hidden, shape.hidden),
        "conv2.W0": _glorot(rng, shape.conv_hidden, shape.conv_hidden),
    }
    for r in REL_NAMES:
        p[f"conv1.W_{r}"] = _glorot(rng, shape.conv_hidden, shape.hidden + shape.edge_hidden)
        p[f"conv2.W_{r}"] = _glorot(rng, shape.conv_hidden, shape.conv_hidden)
    return p


def init_actor(rng: np.random.Generator, shape: NetShape = NetShape()) -> dict:
    p = _trunk_params(rng, shape, shape.vertex_in)
    p["dec.W"] = rng.uniform(-3e-3, 3e-3, size=(1, shape.conv_hidden))
    p["dec.b"] = np.zeros(1)
    return p


def init_critic(rng: np.random.Generator, shape: NetShape = NetShape()) -> dict:
    p = _trunk_params(rng, shape, shape.vertex_in + 1)
    p["head.W"] = rng.uniform(-3e-3, 3e-3, size=(1, shape.conv_hidden))
    p["head.b"] = np.zeros(1)
    return p


# -- shared trunk ---------------------------------------------------------------


def _trunk_forward(x: np.ndarray, b: GraphBatch, p: dict):
    z1, c1 = L.dense_forward(x, p["v_enc.W"], p["v_enc.b"])
    h1, m1 = L.relu_forward(z1)
    ze, ce = L.dense_forward(b.g, p["e_enc.W"], p["e_enc.b"])
    e1, me = L.relu_forward(ze)
    W1 = [p[f"conv1.W_{r}"] for r in REL_NAMES]
    h2, c2 = L.relational_forward(h1, e1, b.src, b.dst, b.etype, W1, p["conv1.W0"])
    W2 = [p[f"conv2.W_{r}"] for r in REL_NAMES]
    h3, c3 = L.relational_forward(h2, None, b.src, b.dst, b.etype, W2, p["conv2.W0"])
    return h3, (c1, m1, ce, me, c2, c3)


def _trunk_backward(dh3: np.ndarray, cache, p: dict):
    c1, m1, ce, me, c2, c3 = cache
    grads = {}
    W2 = [p[f"conv2.W_{r}"] for r in REL_NAMES]
    dh2, _, g2 = L.relational_backward(dh3, c3, W2, p["conv2.W0"])
    grads["conv2.W0"] = g2["W0"]
    for r, gw in zip(REL_NAMES, g2["W_rel"]):
        grads[f"conv2.W_{r}"] = gw
    W1 = [p[f"conv1.W_{r}"] for r in REL_NAMES]
    dh1, de1, g1 = L.relational_backward(dh2, c2, W1, p["conv1.W0"])
    grads["conv1.W0"] = g1["W0"]
    for r, gw in zip(REL_NAMES, g1["W_rel"]):
        grads[f"conv1.W_{r}"] = gw
    dze = L.relu_backward(de1, me)
    dg, ge = L.dense_backward(dze, ce, p["e_enc.W"])
    grads["e_enc.W"], grads["e_enc.b"] = ge["W"], ge["b"]
    dz1 = L.relu_backward(dh1, m1)
    dx, gv = L.dense_backward(dz1, c1, p["v_enc.W"])
    grads["v_enc.W"], grads["v_enc.b"] = gv["W"], gv["b"]
    return dx, dg, grads


# -- actor -------------------------------------------------------------------------


def actor_forward(graph, params: dict, limits: VehicleLimits = VehicleLimits()):
    """Acceleration per vertex in [a_min, a_max]; returns (actions, cache)."""
    b = as_batch(graph)
    if b.n == 0:
        return np.zeros(0), None
    h3, ct = _trunk_forward(b.h, b, params)
    z, cd = L.dense_forward(h3, params["dec.W"], params["dec.b"])
    # tanh reaches exactly +-1 in float64 for large inputs; stay strictly inside the range
    t = np.clip(np.tanh(z[:, 0]), -1.0 + 1e-12, 1.0 - 1e-12)
    mid = 0.5 * (limits.a_max + limits.a_min)
    half = 0.5 * (limits.a_max - limits.a_min)
    return mid + half * t, (ct, cd, t, half, z[:, 0])


def actor_backward(d_actions: np.ndarray, cache, params: dict, d_pre: np.ndarray | None = None):
    """Gradients of the actor parameters and of the input features (dh, dg).

    ``d_pre`` is an optional extra gradient on the decoder output before tanh.
    """
    if cache is None:
        return {k: np.zeros_like(v) for k, v in params.items()}, None, None
    ct, cd, t, half, _ = cache
    dz = d_actions * half * (1.0 - t * t)
    if d_pre is not None:
        dz = dz + d_pre
    dz = dz[:, None]
    dh3, gd = L.dense_backward(dz, cd, params["dec.W"])
    dx, dg, grads = _trunk_backward(dh3, ct, params)
    grads["dec.W"], grads["dec.b"] = gd["W"], gd["b"]
    return grads, dx, dg


# -- critic ------------------------------------------------------------------------


def critic_forward(graph, actions: np.ndarray, params: dict, limits: VehicleLimits = VehicleLimits()):
    """Joint Q value per graph: mean of per-vertex heads; returns (q, cache)."""
    b = as_batch(graph)
    actions = np.asarray(actions, dtype=float)
    if actions.shape != (b.n,):
        raise ValueError(f"expected {b.n} actions, got shape {actions.shape}")
    if b.n == 0:
        return np.zeros(b.n_graphs), None
    x = np.concatenate([b.h, (actions / limits.a_scale)[:, None]], axis=1)
    h3, ct = _trunk_forward(x, b, params)
    qv, ch = L.dense_forward(h3, params["head.W"], params["head.b"])
    q, counts = L.segment_mean(qv[:, 0], b.seg, b.n_graphs)
    return q, (ct, ch, counts, b.seg, limits.a_scale)


def critic_backward(dq: np.ndarray, cache, params: dict):
    """Gradients of the critic parameters and of the actions."""
    if cache is None:
        return {k: np.zeros_like(v) for k, v in params.items()}, np.zeros(0)
    ct, ch, counts, seg, a_scale = cache
    dqv = L.segment_mean_backward(np.asarray(dq, dtype=float), seg, counts)[:, None]
    dh3, gh = L.dense_backward(dqv, ch, params["head.W"])
    dx, _, grads = _trunk_backward(dh3, ct, params)
    grads["head.W"], grads["head.b"] = gh["W"], gh["b"]
    return grads, dx[:, -1] / a_scale
