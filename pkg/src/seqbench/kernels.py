"""Dense numeric kernels with multiply-accumulate instrumentation.

matmul, softmax_lastdim, layer_norm and relu are the shared primitives
(see autodiff.py; they take ndarrays or Var nodes). This module adds the
composed multi-head attention and a central-difference gradient checker
for the in-repo backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Var,
    add,
    layer_norm,
    matmul,
    mul,
    relu,
    reshape,
    softmax_lastdim,
    transpose,
    value_of,
)
from .counting import OpCounter, scoped

__all__ = [
    "OpCounter",
    "AttentionParams",
    "matmul",
    "softmax_lastdim",
    "layer_norm",
    "relu",
    "multi_head_attention",
    "split_heads",
    "merge_heads",
    "scaled_dot_attention",
    "grad_check",
]


@dataclass
class AttentionParams:
    """Projection weights of one attention sublayer (wq/wk/wv/wo: [d, d]).

    The key projection carries no bias: softmax is invariant to a constant
    shift along the key axis, so a key bias is a dead parameter.
    """

    wq: object
    bq: object
    wk: object
    wv: object
    bv: object
    wo: object
    bo: object


def split_heads(x, heads: int):
    """[B, L, d] -> [B, heads, L, d/heads]."""
    b, l, d = value_of(x).shape
    x = reshape(x, (b, l, heads, d // heads))
    return transpose(x, (0, 2, 1, 3))


def merge_heads(x):
    """[B, heads, L, dh] -> [B, L, heads*dh]."""
    b, h, l, dh = value_of(x).shape
    x = transpose(x, (0, 2, 1, 3))
    return reshape(x, (b, l, h * dh))


def scaled_dot_attention(q, k, v, mask=None, counter: OpCounter | None = None):
    """Attention over head-split tensors ([B, H, L, dh]); scale 1/sqrt(dh)."""
    dh = value_of(q).shape[-1]
    with scoped(counter, "attn_scores"):
        scores = matmul(q, transpose(k, (0, 1, 3, 2)), counter)
    scores = mul(scores, 1.0 / math.sqrt(dh))
    attn = softmax_lastdim(scores, mask=mask, counter=counter)
    with scoped(counter, "attn_scores"):
        out = matmul(attn, v, counter)
    return out


def multi_head_attention(q, k, v, heads: int, params: AttentionParams,
                         mask=None, counter: OpCounter | None = None):
    """Full attention sublayer: project, attend per head, concat, project.

    q/k/v are [B, L, d] or [L, d]; d must be divisible by heads. mask is
    boolean, broadcastable to [B, heads, Lq, Lk], True = may attend.
    """
    squeeze = value_of(q).ndim == 2
    if squeeze:
        q = reshape(q, (1,) + value_of(q).shape)
        k = reshape(k, (1,) + value_of(k).shape)
        v = reshape(v, (1,) + value_of(v).shape)
    d = value_of(q).shape[-1]
    if d % heads != 0:
        raise ValueError(f"d_model {d} not divisible by heads {heads}")
    with scoped(counter, "attn_proj"):
        qh = split_heads(add(matmul(q, params.wq, counter), params.bq), heads)
        kh = split_heads(matmul(k, params.wk, counter), heads)
        vh = split_heads(add(matmul(v, params.wv, counter), params.bv), heads)
    ctx = merge_heads(scaled_dot_attention(qh, kh, vh, mask=mask, counter=counter))
    with scoped(counter, "attn_proj"):
        out = add(matmul(ctx, params.wo, counter), params.bo)
    if squeeze:
        out = reshape(out, value_of(out).shape[1:])
    return out


def grad_check(loss_fn, params: dict, epsilon: float = 1e-5,
               n_samples: int = 50, rng: np.random.Generator | None = None) -> float:
    """Max relative error between the tape gradient and central differences.

    loss_fn maps a params dict (values: Var or ndarray) to a scalar loss
    (Var or float) and must be deterministic (dropout disabled). Errors are
    |analytic - numeric| / (|analytic| + |numeric| + 1e-12), maximized over
    n_samples randomly sampled coordinates.
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ValueError(f"epsilon {epsilon!r} outside [1e-7, 1e-3]")
    if rng is None:
        rng = np.random.default_rng(0)

    base = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    var_params = {k: Var(v.copy()) for k, v in base.items()}
    loss = loss_fn(var_params)
    if not isinstance(loss, Var):
        raise TypeError("grad_check: loss_fn must build a Var graph over params")
    loss_val = float(value_of(loss))
    if not np.isfinite(loss_val):
        raise ValueError(f"grad_check: non-finite loss {loss_val}")
    loss.backward()
    grads = {
        k: (v.grad if v.grad is not None else np.zeros_like(v.value))
        for k, v in var_params.items()
    }

    names = sorted(base)
    sizes = np.array([base[k].size for k in names])
    total = int(sizes.sum())
    flat_picks = rng.choice(total, size=min(n_samples, total), replace=False)

    worst = 0.0
    bounds = np.cumsum(sizes)
    for pick in flat_picks:
        which = int(np.searchsorted(bounds, pick, side="right"))
        name = names[which]
        offset = int(pick - (bounds[which] - sizes[which]))
        plus = {k: v.copy() for k, v in base.items()}
        minus = {k: v.copy() for k, v in base.items()}
        plus[name].flat[offset] += epsilon
        minus[name].flat[offset] -= epsilon
        f_plus = float(value_of(loss_fn(plus)))
        f_minus = float(value_of(loss_fn(minus)))
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ValueError("grad_check: non-finite loss under perturbation")
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        analytic = float(grads[name].flat[offset])
        err = abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-12)
        worst = max(worst, err)
    return worst
