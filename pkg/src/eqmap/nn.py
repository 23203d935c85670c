"""Reverse-mode differentiation over a small fixed numpy operator set.

A computation is a DAG of Node objects. Each op builds a Node holding
the forward value and a closure that maps the upstream gradient to the
parent gradients. backward() walks the graph once and returns all
gradients in a dict keyed by node identity, so a graph can be
differentiated several times (once per loss term) without any state to
reset. Everything is float64; convolutions go through im2col and BLAS.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Node",
    "leaf",
    "add",
    "scale",
    "add_weighted",
    "conv3",
    "leaky_relu",
    "avgpool2",
    "upsample2",
    "concat_channels",
    "softmax_cross_entropy",
    "smooth_l1",
    "warp_bilinear",
    "cosine_loss",
    "backward",
    "collect",
]


class Node:
    """One value in the graph. backward_fn: upstream grad -> parent grads."""

    __slots__ = ("value", "parents", "backward_fn")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = value
        self.parents = tuple(parents)
        self.backward_fn = backward_fn


def leaf(value) -> Node:
    return Node(np.asarray(value, dtype=np.float64))


def add(a: Node, b: Node) -> Node:
    return Node(a.value + b.value, (a, b), lambda g: (g, g))


def scale(a: Node, c: float) -> Node:
    return Node(a.value * c, (a,), lambda g: (g * c,))


def add_weighted(terms) -> Node:
    """Weighted sum of scalar nodes: [(node, weight), ...]."""
    terms = list(terms)
    if not terms:
        return Node(0.0)
    nodes = [n for n, _ in terms]
    weights = [w for _, w in terms]
    total = sum(n.value * w for n, w in terms)
    return Node(total, tuple(nodes),
                lambda g: tuple(g * w for w in weights))


def conv3(x: Node, w: Node, b: Node) -> Node:
    """3x3 convolution, stride 1, zero padding 1, via im2col.

    x: (B, C, H, W); w: (O, C, 3, 3); b: (O,).
    """
    xv, wv, bv = x.value, w.value, b.value
    bsz, c, h, wd = xv.shape
    o = wv.shape[0]
    xp = np.pad(xv, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((bsz, h, wd, c, 9))
    for j in range(9):
        dy, dx = divmod(j, 3)
        cols[..., j] = xp[:, :, dy:dy + h, dx:dx + wd].transpose(0, 2, 3, 1)
    mat = cols.reshape(bsz * h * wd, c * 9)
    w2 = wv.reshape(o, c * 9)
    y = (mat @ w2.T + bv).reshape(bsz, h, wd, o).transpose(0, 3, 1, 2)

    def backward_fn(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        dw = (g2.T @ mat).reshape(o, c, 3, 3)
        db = g2.sum(axis=0)
        dcols = (g2 @ w2).reshape(bsz, h, wd, c, 9)
        dxp = np.zeros_like(xp)
        for j in range(9):
            dy, dx = divmod(j, 3)
            dxp[:, :, dy:dy + h, dx:dx + wd] += dcols[..., j].transpose(0, 3, 1, 2)
        return dxp[:, :, 1:-1, 1:-1], dw, db

    return Node(y, (x, w, b), backward_fn)


def leaky_relu(x: Node, slope: float = 0.1) -> Node:
    gate = np.where(x.value >= 0, 1.0, slope)
    return Node(x.value * gate, (x,), lambda g: (g * gate,))


def avgpool2(x: Node) -> Node:
    bsz, c, h, w = x.value.shape
    if h % 2 or w % 2:
        raise ValueError("spatial dimensions must be even")
    y = x.value.reshape(bsz, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward_fn(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return Node(y, (x,), backward_fn)


def upsample2(x: Node) -> Node:
    bsz, c, h, w = x.value.shape
    y = np.repeat(np.repeat(x.value, 2, axis=2), 2, axis=3)

    def backward_fn(g):
        return (g.reshape(bsz, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Node(y, (x,), backward_fn)


def concat_channels(nodes) -> Node:
    nodes = list(nodes)
    sizes = [n.value.shape[1] for n in nodes]
    y = np.concatenate([n.value for n in nodes], axis=1)
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=1))

    return Node(y, tuple(nodes), backward_fn)


def softmax_cross_entropy(logits: Node, targets: np.ndarray,
                          weights: np.ndarray) -> Node:
    """Per-pixel classification loss, averaged over pixels with weight > 0.

    logits: (B, K, H, W); targets: (B, H, W) int; weights: (B, H, W).
    Zero active pixels give a constant 0 with no gradient.
    """
    active = weights > 0
    n = int(active.sum())
    if n == 0:
        return Node(0.0)
    v = logits.value
    m = v.max(axis=1, keepdims=True)
    z = np.exp(v - m)
    zsum = z.sum(axis=1, keepdims=True)
    p = z / zsum
    idx = targets[:, None].astype(np.int64)
    v_true = np.take_along_axis(v, idx, axis=1)[:, 0]
    ce = (m[:, 0] + np.log(zsum[:, 0])) - v_true
    loss = float((weights * ce)[active].sum() / n)

    def backward_fn(g):
        coef = (weights * (g / n))[:, None]
        dlogits = p * coef
        onehot_part = np.zeros_like(v)
        np.put_along_axis(onehot_part, idx, coef, axis=1)
        return (dlogits - onehot_part,)

    return Node(loss, (logits,), backward_fn)


def smooth_l1(pred: Node, target: np.ndarray, weights: np.ndarray,
              delta: float = 0.1) -> Node:
    """Huber regression loss averaged over entries with weight > 0."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    active = weights > 0
    n = int(active.sum())
    if n == 0:
        return Node(0.0)
    d = pred.value - target
    a = np.abs(d)
    q = np.where(a <= delta, 0.5 * d * d / delta, a - 0.5 * delta)
    loss = float((weights * q)[active].sum() / n)

    def backward_fn(g):
        return (weights * np.clip(d / delta, -1.0, 1.0) * (g / n),)

    return Node(loss, (pred,), backward_fn)


def warp_bilinear(x: Node, mapxy: np.ndarray) -> Node:
    """Gather x at stored positions with clamped bilinear interpolation.

    x: (B, C, H, W); mapxy: (B, H, W, 2) or (H, W, 2) shared across the
    batch. Out-of-range positions clamp to the border; callers exclude
    them via their own masks. No gradient flows into the positions.
    """
    bsz, c, h, w = x.value.shape
    if mapxy.ndim == 3:
        mapxy = np.broadcast_to(mapxy, (bsz,) + mapxy.shape)
    xs = np.clip(mapxy[..., 0], 0.0, w - 1.0)
    ys = np.clip(mapxy[..., 1], 0.0, h - 1.0)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 2)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    bi = np.arange(bsz)[:, None, None]
    xt = np.ascontiguousarray(x.value.transpose(0, 2, 3, 1))  # (B, H, W, C)
    corners = ((y0, x0, (1 - fy) * (1 - fx)), (y0, x0 + 1, (1 - fy) * fx),
               (y0 + 1, x0, fy * (1 - fx)), (y0 + 1, x0 + 1, fy * fx))
    yt = np.zeros_like(xt)
    for cy, cx, cw in corners:
        yt += xt[bi, cy, cx] * cw
    y = yt.transpose(0, 3, 1, 2)

    def backward_fn(g):
        gt = g.transpose(0, 2, 3, 1)
        dxt = np.zeros_like(xt)
        for cy, cx, cw in corners:
            np.add.at(dxt, (bi, cy, cx), gt * cw)
        return (dxt.transpose(0, 3, 1, 2),)

    return Node(y, (x,), backward_fn)


def cosine_loss(a: Node, b: Node, include: np.ndarray,
                eps: float = 1e-8) -> Node:
    """1 - mean per-pixel cosine similarity of channel vectors.

    include: (B, H, W) bool. Pixels excluded by it, or whose vector norm
    in either input is below eps, do not enter the mean. An empty mean
    gives a constant 0 with no gradient.
    """
    va, vb = a.value, b.value
    na = np.sqrt((va * va).sum(axis=1))
    nb = np.sqrt((vb * vb).sum(axis=1))
    ok = include & (na >= eps) & (nb >= eps)
    n = int(ok.sum())
    if n == 0:
        return Node(0.0)
    nas = np.where(ok, na, 1.0)
    nbs = np.where(ok, nb, 1.0)
    dot = (va * vb).sum(axis=1)
    rho = np.where(ok, dot / (nas * nbs), 0.0)
    loss = 1.0 - float(rho[ok].sum() / n)

    def backward_fn(g):
        coef = np.where(ok, -g / n, 0.0)[:, None]
        inv = (1.0 / (nas * nbs))[:, None]
        da = coef * (vb * inv - va * (rho / (nas * nas))[:, None])
        db = coef * (va * inv - vb * (rho / (nbs * nbs))[:, None])
        return da, db

    return Node(loss, (a, b), backward_fn)


def backward(root: Node, seed: float = 1.0) -> dict:
    """Gradients of a scalar root w.r.t. every node, keyed by id(node).

    Stateless: nothing is stored on the nodes, so independent calls on
    overlapping graphs do not interfere.
    """
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    grads = {id(root): seed}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads


def collect(leaves: dict, grads: dict, layout) -> np.ndarray:
    """Assemble a flat gradient vector from named leaves.

    layout: iterable of (name, shape, offset); leaves: name -> Node.
    Missing gradients contribute zeros.
    """
    total = 0
    entries = []
    for name, shape, offset in layout:
        size = int(np.prod(shape))
        entries.append((name, shape, offset, size))
        total = max(total, offset + size)
    flat = np.zeros(total)
    for name, shape, offset, size in entries:
        g = grads.get(id(leaves[name]))
        if g is not None:
            flat[offset:offset + size] = np.asarray(g).ravel()
    return flat