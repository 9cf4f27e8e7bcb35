"""Functional numpy layers with explicit reverse-mode gradients.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache and returns the gradient of the
inputs plus a dict of parameter gradients.  Weight matrices are stored
out x in, so a dense layer computes ``x @ W.T + b``.
"""
from __future__ import annotations

import numpy as np


def dense_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    return x @ W.T + b, x


def dense_backward(dy: np.ndarray, x: np.ndarray, W: np.ndarray):
    return dy @ W, {"W": dy.T @ x, "b": dy.sum(axis=0)}


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy: np.ndarray, mask: np.ndarray):
    return dy * mask


def segment_max(msgs: np.ndarray, dst: np.ndarray, src: np.ndarray, n: int):
    """Element-wise max of edge messages per destination vertex.

    Returns ``(out, arg)``: ``out`` is (n, H) with zeros for vertices without
    incoming edges; ``arg`` holds, per vertex and channel, the index of the
    winning edge (ties go to the lowest source vertex) or -1.
    """
    H = msgs.shape[1] if msgs.ndim == 2 else 0
    E = len(dst)
    if E == 0:
        return np.zeros((n, H)), np.full((n, H), -1, dtype=np.int64)
    # incoming edges of every vertex as columns of a slot table, sorted by source
    order = np.lexsort((src, dst))
    d = dst[order]
    counts = np.bincount(d, minlength=n)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    pos = np.arange(E) - starts[d]
    slots = np.full((n, max(int(counts.max()), 1)), -1, dtype=np.int64)
    slots[d, pos] = order
    out = np.full((n, H), -np.inf)
    arg = np.full((n, H), -1, dtype=np.int64)
    for k in range(slots.shape[1]):
        col = slots[:, k]
        has = col >= 0
        cand = np.where(has[:, None], msgs[np.maximum(col, 0)], -np.inf)
        better = cand > out  # strict, so the first (lowest source) edge wins ties
        out = np.where(better, cand, out)
        arg = np.where(better, col[:, None], arg)
    out[counts == 0] = 0.0
    return out, arg


def segment_max_backward(dout: np.ndarray, arg: np.ndarray, n_edges: int) -> np.ndarray:
    dm = np.zeros((n_edges, dout.shape[1]))
    rows, cols = np.nonzero(arg >= 0)
    dm[arg[rows, cols], cols] = dout[rows, cols]
    return dm


def relational_forward(h: np.ndarray, e: np.ndarray | None, src, dst, etype, W_rel: list, W0: np.ndarray):
    """ReLU( sum_r max_{j in N_r(i)} W_r [h_j, e_ji] + W0 h_i ).

    ``e`` is None for the plain relational layer (messages ``W_r h_j``).
    """
    n, fh = h.shape
    pre = h @ W0.T
    per_rel = []
    for r, Wr in enumerate(W_rel):
        sel = np.flatnonzero(etype == r)
        # the vertex part of each message is computed once per vertex, then gathered
        msgs = (h @ Wr[:, :fh].T)[src[sel]]
        if e is not None:
            msgs = msgs + e[sel] @ Wr[:, fh:].T
        agg, arg = segment_max(msgs, dst[sel], src[sel], n)
        pre = pre + agg
        per_rel.append((sel, arg))
    out, mask = relu_forward(pre)
    return out, (h, e, src, per_rel, mask)


def relational_backward(dout: np.ndarray, cache, W_rel: list, W0: np.ndarray):
    h, e, src, per_rel, mask = cache
    dpre = relu_backward(dout, mask)
    dh = dpre @ W0
    de = None if e is None else np.zeros_like(e)
    grads = {"W0": dpre.T @ h, "W_rel": []}
    n, fh = h.shape
    for (sel, arg), Wr in zip(per_rel, W_rel):
        dm = segment_max_backward(dpre, arg, len(sel))
        # scatter edge gradients onto source vertices first: sum_e dm_e h_src(e)
        dm_src = np.zeros((n, dm.shape[1]))
        np.add.at(dm_src, src[sel], dm)
        gW = dm_src.T @ h
        dh += dm_src @ Wr[:, :fh]
        if e is not None:
            gW = np.concatenate([gW, dm.T @ e[sel]], axis=1)
            de[sel] = dm @ Wr[:, fh:]
        grads["W_rel"].append(gW)
    return dh, de, grads


def segment_mean(x: np.ndarray, seg: np.ndarray, n_seg: int):
    counts = np.bincount(seg, minlength=n_seg).astype(float)
    sums = np.zeros((n_seg,) + x.shape[1:])
    np.add.at(sums, seg, x)
    safe = np.where(counts > 0, counts, 1.0)
    return sums / safe.reshape((-1,) + (1,) * (x.ndim - 1)), safe


def segment_mean_backward(dy: np.ndarray, seg: np.ndarray, counts: np.ndarray):
    return (dy / counts.reshape((-1,) + (1,) * (dy.ndim - 1)))[seg]


def edge_rgcn_forward(h: np.ndarray, e: np.ndarray, src, dst, etype, W_rel: list, W0: np.ndarray) -> np.ndarray:
    """Relational layer whose messages concatenate source features and edge features."""
    return relational_forward(h, e, np.asarray(src), np.asarray(dst), np.asarray(etype), W_rel, W0)[0]


def rgcn_forward(h: np.ndarray, src, dst, etype, W_rel: list, W0: np.ndarray) -> np.ndarray:
    """Plain relational layer (messages ``W_r h_j``)."""
    return relational_forward(h, None, np.asarray(src), np.asarray(dst), np.asarray(etype), W_rel, W0)[0]
