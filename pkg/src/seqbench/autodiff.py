"""Reverse-mode autodiff over numpy arrays.

Every op accepts either plain ndarrays or Var nodes. With ndarrays the op
just computes numpy values (the inference path); with at least one Var it
additionally records the backward closure (the training path). The same
model code therefore serves decoding and training.

Matmuls count multiply-accumulates into an optional OpCounter in both
modes; softmax / layer norm / relu count elementwise work.
"""

from __future__ import annotations

import numpy as np

from .counting import OpCounter


class Var:
    """A node in the backward tape: a value plus how to push gradients."""

    __slots__ = ("value", "grad", "_parents", "_bw")

    def __init__(self, value, _parents=(), _bw=None):
        self.value = np.asarray(value)
        self.grad = None
        self._parents = _parents
        self._bw = _bw

    @property
    def shape(self):
        return self.value.shape

    def backward(self) -> None:
        """Accumulate gradients of this (scalar or array) node into all parents."""
        topo: list[Var] = []
        seen: set[int] = set()
        stack: list[tuple[Var, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(topo):
            if node._bw is not None and node.grad is not None:
                node._bw(node.grad)

    def item(self) -> float:
        return float(self.value)


def value_of(x):
    """Raw ndarray behind x, whether x is a Var, ndarray, or scalar."""
    if isinstance(x, Var):
        return x.value
    return np.asarray(x)


def _is_var(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def _acc(var: Var, g) -> None:
    var.grad = g if var.grad is None else var.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _mm(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """x @ y, collapsing leading dims into one GEMM when y is a plain matrix."""
    if y.ndim == 2 and x.ndim > 2:
        lead = x.shape[:-1]
        return (x.reshape(-1, x.shape[-1]) @ y).reshape(lead + (y.shape[-1],))
    return x @ y


def matmul(a, b, counter: OpCounter | None = None):
    """Batched matrix product a @ b; counts out.size * inner_dim MACs."""
    av, bv = value_of(a), value_of(b)
    if av.shape[-1] != bv.shape[-2]:
        raise ValueError(
            f"matmul: inner dims differ, {av.shape} vs {bv.shape}"
        )
    out = _mm(av, bv)
    if counter is not None:
        counter.add_macs(out.size * av.shape[-1])
    if not _is_var(a, b):
        return out

    parents = tuple(x for x in (a, b) if isinstance(x, Var))

    def bw(g):
        if isinstance(a, Var):
            _acc(a, _unbroadcast(_mm(g, np.swapaxes(bv, -1, -2)), av.shape))
        if isinstance(b, Var):
            if bv.ndim == 2 and g.ndim > 2:
                k = av.shape[-1]
                gb = av.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
            _acc(b, gb)

    return Var(out, parents, bw)


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    if not _is_var(a, b):
        return out
    parents = tuple(x for x in (a, b) if isinstance(x, Var))

    def bw(g):
        if isinstance(a, Var):
            _acc(a, _unbroadcast(g, av.shape))
        if isinstance(b, Var):
            _acc(b, _unbroadcast(g, bv.shape))

    return Var(out, parents, bw)


def mul(a, b):
    """Elementwise product; a non-Var operand is treated as a constant."""
    av, bv = value_of(a), value_of(b)
    out = av * bv
    if not _is_var(a, b):
        return out
    parents = tuple(x for x in (a, b) if isinstance(x, Var))

    def bw(g):
        if isinstance(a, Var):
            _acc(a, _unbroadcast(g * bv, av.shape))
        if isinstance(b, Var):
            _acc(b, _unbroadcast(g * av, bv.shape))

    return Var(out, parents, bw)


def relu(x, counter: OpCounter | None = None):
    v = value_of(x)
    if counter is not None:
        counter.add_elementwise(v.size)
    keep = v > 0
    out = np.where(keep, v, 0.0)
    if not isinstance(x, Var):
        return out

    def bw(g):
        _acc(x, g * keep)

    return Var(out, (x,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5, counter: OpCounter | None = None):
    """Normalize the last dim to zero mean / unit variance, then affine."""
    v, gv, bv = value_of(x), value_of(gain), value_of(bias)
    if gv.shape[-1] != v.shape[-1] or bv.shape[-1] != v.shape[-1]:
        raise ValueError("layer_norm: gain/bias must match the last dim")
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gv + bv
    if counter is not None:
        counter.add_elementwise(v.size * 8)
    if not _is_var(x, gain, bias):
        return out
    parents = tuple(p for p in (x, gain, bias) if isinstance(p, Var))

    def bw(g):
        if isinstance(gain, Var):
            _acc(gain, (g * xhat).reshape(-1, v.shape[-1]).sum(axis=0))
        if isinstance(bias, Var):
            _acc(bias, g.reshape(-1, v.shape[-1]).sum(axis=0))
        if isinstance(x, Var):
            dxhat = g * gv
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _acc(x, inv * (dxhat - m1 - xhat * m2))

    return Var(out, parents, bw)


def softmax_lastdim(x, mask=None, counter: OpCounter | None = None):
    """Stable masked softmax over the last dim.

    mask is boolean, broadcastable to x, True = position participates.
    Masked entries are exactly 0 in the output. A fully masked row is an
    error (it would signal an empty attention context).
    """
    v = value_of(x)
    if mask is not None:
        mb = np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
        if not mb.any(axis=-1).all():
            raise ValueError("softmax_lastdim: fully masked row")
        z = np.where(mb, v, -np.inf)
    else:
        z = v
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    out = e / e.sum(axis=-1, keepdims=True)
    if counter is not None:
        counter.add_elementwise(v.size * 4)
    if not isinstance(x, Var):
        return out

    def bw(g):
        _acc(x, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return Var(out, (x,), bw)


def log_softmax_lastdim(x):
    v = value_of(x)
    m = v.max(axis=-1, keepdims=True)
    shifted = v - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    if not isinstance(x, Var):
        return out
    sm = np.exp(out)

    def bw(g):
        _acc(x, g - sm * g.sum(axis=-1, keepdims=True))

    return Var(out, (x,), bw)


def embedding_lookup(table, ids):
    """Gather rows of table by integer ids (any id array shape)."""
    tv = value_of(table)
    ids = np.asarray(ids)
    out = tv[ids]
    if not isinstance(table, Var):
        return out

    def bw(g):
        g2 = np.asarray(g).reshape(-1, tv.shape[-1])
        flat = ids.reshape(-1)
        if tv.shape[0] * flat.size <= 1 << 24:
            # scatter-add as a one-hot GEMM; much faster than np.add.at
            onehot = np.zeros((tv.shape[0], flat.size), dtype=g2.dtype)
            onehot[flat, np.arange(flat.size)] = 1.0
            dt = onehot @ g2
        else:
            dt = np.zeros_like(tv)
            np.add.at(dt, flat, g2)
        _acc(table, dt)

    return Var(out, (table,), bw)


def transpose(x, axes):
    v = value_of(x)
    out = v.transpose(axes)
    if not isinstance(x, Var):
        return out
    inv = np.argsort(axes)

    def bw(g):
        _acc(x, g.transpose(inv))

    return Var(out, (x,), bw)


def reshape(x, shape):
    v = value_of(x)
    out = v.reshape(shape)
    if not isinstance(x, Var):
        return out

    def bw(g):
        _acc(x, g.reshape(v.shape))

    return Var(out, (x,), bw)


def concat(xs, axis: int):
    vals = [value_of(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    if not _is_var(*xs):
        return out
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]
    parents = tuple(x for x in xs if isinstance(x, Var))

    def bw(g):
        pieces = np.split(g, splits, axis=axis)
        for x, piece in zip(xs, pieces):
            if isinstance(x, Var):
                _acc(x, piece)

    return Var(out, parents, bw)


def sum_reduce(x, axis=None, keepdims: bool = False):
    v = value_of(x)
    out = v.sum(axis=axis, keepdims=keepdims)
    if not isinstance(x, Var):
        return out

    def bw(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _acc(x, np.broadcast_to(gg, v.shape))

    return Var(out, (x,), bw)


def take_along_last(x, idx):
    """x[..., idx] with one index per leading position (idx.shape == x.shape[:-1])."""
    v = value_of(x)
    idx = np.asarray(idx)
    out = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]
    if not isinstance(x, Var):
        return out

    def bw(g):
        dx = np.zeros_like(v)
        np.put_along_axis(dx, idx[..., None], np.asarray(g)[..., None], axis=-1)
        _acc(x, dx)

    return Var(out, (x,), bw)


def dropout(x, rate: float, rng: np.random.Generator | None):
    """Inverted dropout. Identity when rng is None or rate <= 0."""
    if rng is None or rate <= 0.0:
        return x
    v = value_of(x)
    keep = (rng.random(v.shape) >= rate).astype(v.dtype)
    scale = 1.0 / (1.0 - rate)
    out = v * keep * scale
    if not isinstance(x, Var):
        return out

    def bw(g):
        _acc(x, g * keep * scale)

    return Var(out, (x,), bw)
