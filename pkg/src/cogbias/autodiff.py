"""Dense float64 tensors with reverse-mode differentiation.

A :class:`Node` wraps a numpy array.  Every op builds a new node holding its
forward value plus a closure that maps the upstream gradient to gradients for
its parents.  :func:`backward` walks the graph in reverse topological order.

Only what the hierarchical attention model needs is here; broadcasting is
limited to adding/multiplying a trailing-shape operand (biases, masks).
Randomness (dropout, init) always comes from an explicit
``numpy.random.Generator`` (PCG64), never from global state.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import GraphConsumed, NonFiniteError, NonFiniteGradient, NotScalar, ShapeError

DTYPE = np.float64
CHECKPOINT_FORMAT = "cogbias-checkpoint"
CHECKPOINT_VERSION = 1

# incremented each time log() clamps a probability below its floor
underflow_clamps = 0


class Node:
    __slots__ = ("value", "grad", "parents", "backward_rule", "requires_grad", "name", "_consumed")

    def __init__(self, value, parents: tuple = (), backward_rule: Callable | None = None,
                 requires_grad: bool = False, name: str | None = None):
        value = np.asarray(value, dtype=DTYPE)
        if not np.isfinite(value).all():
            raise NonFiniteError(f"non-finite value in {name or 'node'} of shape {value.shape}")
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_rule = backward_rule
        self.requires_grad = requires_grad
        self.name = name
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Node(name={self.name!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def parameter(value, name: str | None = None) -> Node:
    return Node(np.array(value, dtype=DTYPE, copy=True), requires_grad=True, name=name)


def constant(value) -> Node:
    return Node(value)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _make(value, parents: Sequence[Node], rule: Callable) -> Node:
    """Wrap an op result, recording the graph only when some input needs a gradient."""
    if any(p.requires_grad for p in parents):
        return Node(value, tuple(parents), rule, requires_grad=True)
    return Node(value)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_trailing(a: Node, b: Node, op: str):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    try:
        out = np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}") from None
    if out != sa and out != sb:
        raise ShapeError(f"{op}: broadcasting {sa} with {sb} would grow both operands")


# ---------------------------------------------------------------------------
# elementwise and linear algebra
# ---------------------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    _check_trailing(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Node, b: Node) -> Node:
    _check_trailing(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Node, b: Node) -> Node:
    _check_trailing(a, b, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def matmul(a: Node, b: Node) -> Node:
    """``a @ b`` for ``a`` of shape ``(..., k)`` and a 2-D ``b`` of shape ``(k, p)``."""
    av, bv = a.value, b.value
    if bv.ndim != 2 or av.ndim < 1 or av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")

    def rule(g):
        ga = g @ bv.T
        gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, bv.shape[1])
        return ga, gb

    return _make(av @ bv, (a, b), rule)


def tanh(x: Node) -> Node:
    y = np.tanh(x.value)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def sigmoid(x: Node) -> Node:
    y = _sigmoid(x.value)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def log(x: Node, floor: float | None = None) -> Node:
    """Natural log.  With ``floor``, inputs below it are clamped (zero gradient there)."""
    global underflow_clamps
    v = x.value
    if floor is not None:
        low = v < floor
        if low.any():
            underflow_clamps += int(low.sum())
            v = np.where(low, floor, v)
            keep = ~low
            return _make(np.log(v), (x,), lambda g: (np.where(keep, g / v, 0.0),))
    if (v <= 0).any():
        raise NonFiniteError("log of non-positive value")
    return _make(np.log(v), (x,), lambda g: (g / v,))


def softmax(x: Node, axis: int = -1, mask: np.ndarray | None = None) -> Node:
    """Softmax along ``axis``; positions where ``mask`` is False get exactly zero weight."""
    z = x.value
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=axis).all():
            raise ShapeError("softmax: a slice along the reduced axis is fully masked")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), rule)


def dropout(x: Node, p: float, train: bool, rng: np.random.Generator | None = None) -> Node:
    """Inverted dropout: identity when ``train`` is False or ``p == 0``."""
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout p must be in [0, 1), got {p}")
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.value * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# shape manipulation and reductions
# ---------------------------------------------------------------------------

def reshape(x: Node, shape: tuple[int, ...]) -> Node:
    src = x.shape
    try:
        y = x.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {shape}") from None
    return _make(y, (x,), lambda g: (g.reshape(src),))


def broadcast_to(x: Node, shape: tuple[int, ...]) -> Node:
    src = x.shape
    try:
        y = np.broadcast_to(x.value, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {src} to {shape}") from None
    return _make(np.array(y), (x,), lambda g: (_unbroadcast(g, src),))


def concat(xs: Sequence[Node], axis: int = -1) -> Node:
    vals = [x.value for x in xs]
    try:
        y = np.concatenate(vals, axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[v.shape for v in vals]} on axis {axis}") from None
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _make(y, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)))


def slice_(x: Node, index) -> Node:
    src = x.shape
    y = x.value[index]

    def rule(g):
        out = np.zeros(src, dtype=DTYPE)
        out[index] = g
        return (out,)

    return _make(np.array(y), (x,), rule)


def sum_(x: Node, axis=None, keepdims: bool = False) -> Node:
    src = x.shape
    y = x.value.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(y, (x,), rule)


def mean(x: Node, axis=None) -> Node:
    count = x.value.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis), Node(1.0 / count))


def embedding_lookup(table: Node, ids: np.ndarray) -> Node:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: ids outside [0, {table.shape[0]}) for table {table.shape}")
    src = table.shape

    def rule(g):
        out = np.zeros(src, dtype=DTYPE)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, src[1]))
        return (out,)

    return _make(table.value[ids], (table,), rule)


def gather(x: Node, ids: np.ndarray) -> Node:
    """Pick ``x[..., ids[...]]`` along the last axis."""
    ids = np.asarray(ids)
    if ids.shape != x.shape[:-1]:
        raise ShapeError(f"gather: index shape {ids.shape} does not match {x.shape[:-1]}")
    src = x.shape
    y = np.take_along_axis(x.value, ids[..., None], axis=-1)[..., 0]

    def rule(g):
        out = np.zeros(src, dtype=DTYPE)
        np.put_along_axis(out, ids[..., None], g[..., None], axis=-1)
        return (out,)

    return _make(y, (x,), rule)


# ---------------------------------------------------------------------------
# recurrent layer
# ---------------------------------------------------------------------------

def lstm_numpy(X, W, U, b, h0=None, mask=None, reverse=False):
    """Forward LSTM pass in plain numpy.

    Gate order in the stacked weights is input, forget, output, candidate.
    Where ``mask[:, t]`` is False the state is carried through unchanged.
    Returns ``(hs, cache)``; ``cache`` feeds :func:`_lstm_backward`.
    """
    B, T, _ = X.shape
    H = U.shape[0]
    G = X @ W + b
    h = np.zeros((B, H)) if h0 is None else h0
    c = np.zeros((B, H))
    hs = np.empty((B, T, H))
    steps = range(T - 1, -1, -1) if reverse else range(T)
    cache = []
    for t in steps:
        z = G[:, t] + h @ U
        sig = _sigmoid(z[:, :3 * H])
        i, f, o = sig[:, :H], sig[:, H:2 * H], sig[:, 2 * H:]
        gg = np.tanh(z[:, 3 * H:])
        c_new = f * c + i * gg
        tc = np.tanh(c_new)
        h_new = o * tc
        if mask is not None:
            mt = mask[:, t, None]
            c_new = np.where(mt, c_new, c)
            h_new = np.where(mt, h_new, h)
        cache.append((t, h, c, sig, gg, tc))
        h, c = h_new, c_new
        hs[:, t] = h
    return hs, cache


def _lstm_backward(dH, X, W, U, cache, mask):
    B, T, D = X.shape
    H = U.shape[0]
    dG = np.empty((B, T, 4 * H))
    dU = np.zeros_like(U)
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    UT = U.T
    for t, h_prev, c_prev, sig, gg, tc in reversed(cache):
        i, f, o = sig[:, :H], sig[:, H:2 * H], sig[:, 2 * H:]
        dh = dh + dH[:, t]
        if mask is not None:
            mt = mask[:, t, None]
            dh_in, dc_in = np.where(mt, dh, 0.0), np.where(mt, dc, 0.0)
            dh_skip, dc_skip = dh - dh_in, dc - dc_in
        else:
            dh_in, dc_in = dh, dc
        dct = dc_in + dh_in * o * (1.0 - tc * tc)
        dz = dG[:, t]
        dz[:, :H] = dct * gg
        dz[:, H:2 * H] = dct * c_prev
        dz[:, 2 * H:3 * H] = dh_in * tc
        dz[:, :3 * H] *= sig * (1.0 - sig)
        dz[:, 3 * H:] = dct * i * (1.0 - gg * gg)
        dU += h_prev.T @ dz
        dh = dz @ UT
        dc = dct * f
        if mask is not None:
            dh += dh_skip
            dc += dc_skip
    dG2 = dG.reshape(-1, 4 * H)
    dW = X.reshape(-1, D).T @ dG2
    db = dG2.sum(axis=0)
    dX = (dG2 @ W.T).reshape(B, T, D)
    return dX, dW, dU, db, dh


def lstm(x: Node, W: Node, U: Node, b: Node, h0: Node | None = None,
         mask: np.ndarray | None = None, reverse: bool = False) -> Node:
    """Run an LSTM over ``x`` of shape ``(B, T, D)``; returns all hidden states ``(B, T, H)``."""
    if x.value.ndim != 3:
        raise ShapeError(f"lstm: input must be (B, T, D), got {x.shape}")
    D = x.shape[2]
    H = U.shape[0]
    if W.shape != (D, 4 * H) or U.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise ShapeError(f"lstm: weights {W.shape}, {U.shape}, {b.shape} do not fit input {x.shape} "
                         f"and hidden size {H}")
    if h0 is not None and h0.shape != (x.shape[0], H):
        raise ShapeError(f"lstm: h0 shape {h0.shape} != {(x.shape[0], H)}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape[:2]:
            raise ShapeError(f"lstm: mask shape {mask.shape} != {x.shape[:2]}")
        if mask.all():
            mask = None
    X, Wv, Uv = x.value, W.value, U.value
    hs, cache = lstm_numpy(X, Wv, Uv, b.value, None if h0 is None else h0.value, mask, reverse)

    def rule(g):
        dX, dW, dU, db, dh0 = _lstm_backward(g, X, Wv, Uv, cache, mask)
        grads = (dX, dW, dU, db)
        return grads + (dh0,) if h0 is not None else grads

    parents = (x, W, U, b) + ((h0,) if h0 is not None else ())
    return _make(hs, parents, rule)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _toposort(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> dict[Node, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable parameter.

    Returns a mapping from leaf node to its gradient.  A graph can be
    differentiated once; the intermediate closures are released afterwards.
    """
    if loss.value.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumed("backward already called on this loss; rebuild the graph")
    if not loss.requires_grad:
        return {}
    grads = {id(loss): np.ones_like(loss.value)}
    leaves = {}
    for node in reversed(_toposort(loss)):
        if node._consumed:
            raise GraphConsumed(f"{node!r} belongs to an already differentiated graph")
        g = grads.pop(id(node), None)
        if node.backward_rule is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                leaves[node] = node.grad
            continue
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        node.backward_rule = None
        node.parents = ()
        node._consumed = True
    loss._consumed = True
    return leaves


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

def adam_init(params: Mapping[str, np.ndarray]) -> dict:
    return {
        "step": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: dict,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update.  Inputs are not mutated.

    Parameters missing from ``grads`` are treated as having zero gradient.
    Returns ``(new_params, new_state)``.
    """
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for {k}; step aborted")
    step = state["step"] + 1
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} vs parameter {p.shape} for {k}")
        m = beta1 * state["m"][k] + (1.0 - beta1) * g
        v = beta2 * state["v"][k] + (1.0 - beta2) * g * g
        new_params[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[k], new_v[k] = m, v
    return new_params, {"step": step, "m": new_m, "v": new_v}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    # float repr round-trips exactly through json
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {
            k: {"shape": list(v.shape), "data": np.asarray(v, dtype=DTYPE).ravel().tolist()}
            for k, v in sorted(params.items())
        },
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    params = {}
    for k, entry in doc["params"].items():
        data = np.array(entry["data"], dtype=DTYPE)
        shape = tuple(entry["shape"])
        if data.size != int(np.prod(shape)):
            raise ShapeError(f"{path}: {k} has {data.size} values for shape {shape}")
        params[k] = data.reshape(shape)
    return params, doc.get("meta", {})
