"""A small tape-free reverse-mode engine over numpy arrays.

Every ``Tensor`` produced by an op keeps references to its parents and a
closure that maps its output gradient to parent gradients.  ``backward``
walks the graph in reverse topological order.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from ..errors import NumericalError, ShapeError

_ids = itertools.count()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "id", "name")

    def __init__(self, data, parents: tuple["Tensor", ...] = (), backward_fn=None,
                 requires_grad: bool | None = None, op: str = "leaf", name: str | None = None):
        self.data = np.asarray(data)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        self.op = op
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape}, id={self.id})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False, op="const")


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, check_finite: bool = True) -> None:
    """Populate ``.grad`` on every tensor reachable from scalar ``loss``.

    Leaves keep accumulating into existing ``.grad`` arrays; intermediate
    gradients are released once consumed.
    """
    if loss.data.size != 1:
        raise ShapeError("backward needs a scalar loss")
    order = _topo(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        g = node.grad
        if g is None or node.backward_fn is None:
            continue
        if check_finite and not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient at node {node.id} ({node.op})", node.id)
        grads = node.backward_fn(g)
        for p, pg in zip(node.parents, grads):
            if pg is not None and p.requires_grad:
                p._accumulate(pg)
        node.grad = None
    for node in order:
        if node.backward_fn is None and node.grad is not None and check_finite:
            if not np.isfinite(node.grad).all():
                raise NumericalError(f"non-finite gradient at leaf {node.id} ({node.name})", node.id)


# ---------------------------------------------------------------------------
# dense primitives


def matmul(x: Tensor, w: Tensor) -> Tensor:
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul shapes {x.shape} @ {w.shape}")

    def bw(g):
        return g @ w.data.T, x.data.T @ g

    return Tensor(x.data @ w.data, (x, w), bw, op="matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes {a.shape} vs {b.shape}")
    return Tensor(a.data + b.data, (a, b), lambda g: (g, g), op="add")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias of width {b.shape[0]} on {x.shape}")
    return Tensor(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)), op="bias")


def scale(x: Tensor, c: float) -> Tensor:
    return Tensor(x.data * c, (x,), lambda g: (g * c,), op="scale")


def concat(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat rows {a.shape[0]} vs {b.shape[0]}")
    ca = a.shape[1]
    return Tensor(np.concatenate([a.data, b.data], axis=1), (a, b),
                  lambda g: (g[:, :ca], g[:, ca:]), op="concat")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return Tensor(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), op="relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    v = x.data
    v2 = v * v
    t = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return Tensor(out, (x,), bw, op="gelu")


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """out[r] = x[idx[r]]; ``idx`` may repeat."""
    n = x.shape[0]

    def bw(g):
        gx = np.zeros((n,) + g.shape[1:], dtype=g.dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return Tensor(x.data[idx], (x,), bw, op="gather")


def segment_mean(x: Tensor, seg: np.ndarray, n_seg: int) -> Tensor:
    """Mean of the rows of ``x`` sharing a segment id."""
    cnt = np.bincount(seg, minlength=n_seg).astype(x.dtype)
    out = np.zeros((n_seg,) + x.shape[1:], dtype=x.dtype)
    np.add.at(out, seg, x.data)
    out /= cnt[:, None]

    def bw(g):
        return ((g / cnt[:, None])[seg],)

    return Tensor(out, (x,), bw, op="segment_mean")


def fill_rows(x: Tensor, dst: np.ndarray, n_out: int, fill: Tensor) -> Tensor:
    """Rows ``dst`` of an (n_out, C) output come from ``x``; the rest equal ``fill``."""
    if x.shape[1:] != fill.shape:
        raise ShapeError(f"fill vector {fill.shape} for rows {x.shape}")
    empty = np.ones(n_out, dtype=bool)
    empty[dst] = False
    out = np.empty((n_out,) + x.shape[1:], dtype=x.dtype)
    out[dst] = x.data
    out[empty] = fill.data

    def bw(g):
        return g[dst], g[empty].sum(axis=0)

    return Tensor(out, (x, fill), bw, op="fill_rows")


def conv_pairs(x: Tensor, w: Tensor, pairs, n_out: int) -> Tensor:
    """Sparse convolution y[u] = sum_t sum_{(u, v) in pairs[t]} x[v] @ w[t].

    ``pairs[t]`` holds matching (output rows, input rows) for tap ``t``;
    output rows never repeat within a tap, so plain fancy-index updates are
    exact.
    """
    k, cin, cout = w.shape
    if len(pairs) != k:
        raise ShapeError(f"kernel has {k} taps but the rulebook has {len(pairs)}")
    if x.shape[1] != cin:
        raise ShapeError(f"conv expects {cin} input channels, got {x.shape[1]}")
    xd, wd = x.data, w.data
    y = np.zeros((n_out, cout), dtype=np.result_type(xd.dtype, wd.dtype))
    for t, (u, v) in enumerate(pairs):
        if u.size:
            y[u] += xd[v] @ wd[t]

    def bw(g):
        gx = np.zeros_like(xd)
        gw = np.zeros_like(wd)
        for t, (u, v) in enumerate(pairs):
            if u.size:
                gu = g[u]
                gx[v] += gu @ wd[t].T
                gw[t] = xd[v].T @ gu
        return gx, gw

    return Tensor(y, (x, w), bw, op="conv")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def bce_with_logits(z: Tensor, y: np.ndarray) -> Tensor:
    """Mean binary cross-entropy in the stable form max(z,0) - z*y + log1p(exp(-|z|))."""
    zd = z.data.reshape(-1)
    yd = np.asarray(y, dtype=z.dtype).reshape(-1)
    if zd.shape != yd.shape:
        raise ShapeError(f"{zd.shape[0]} logits vs {yd.shape[0]} labels")
    n = zd.shape[0]
    per = np.maximum(zd, 0) - zd * yd + np.log1p(np.exp(-np.abs(zd)))
    out = np.asarray(per.sum() / n, dtype=z.dtype)

    def bw(g):
        return ((g * (_sigmoid(zd) - yd) / n).reshape(z.shape).astype(z.dtype),)

    return Tensor(out, (z,), bw, op="bce")


def mean_scalars(xs: list[Tensor]) -> Tensor:
    n = len(xs)
    out = np.asarray(sum(x.data for x in xs) / n, dtype=xs[0].dtype)
    return Tensor(out, tuple(xs), lambda g: tuple(g / n for _ in xs), op="mean")


def weighted_sum(x: Tensor, w: np.ndarray) -> Tensor:
    """sum(x * w) to a scalar; used to probe gradients."""
    w = np.asarray(w, dtype=x.dtype)
    return Tensor(np.asarray((x.data * w).sum(), dtype=x.dtype), (x,), lambda g: (g * w,), op="wsum")
