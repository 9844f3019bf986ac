"""Differentiable primitives.

Forward passes accumulate in float64 with explicit left folds, so an output
element never depends on how many other rows share the call. Only the
primitive's output is rounded to the tensor grid. Backward passes use plain
numpy contractions; they are deterministic for fixed shapes, which is all
reproducibility needs.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from seqforge.numerics.half import DType, round_to
from seqforge.numerics.tensor import Node, Tensor, current_tape


def deterministic_sum(values: Sequence[float]) -> float:
    """Strict left-to-right fold starting from 0.0."""
    acc = 0.0
    for v in values:
        acc = acc + float(v)
    return acc


def fold_sum(arr: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    """Left fold along ``axis``; elementwise identical for any other extent."""
    moved = np.moveaxis(np.asarray(arr, dtype=np.float64), axis, 0)
    if moved.shape[0] == 0:
        acc = np.zeros(moved.shape[1:])
    else:
        acc = moved[0].copy()
        for i in range(1, moved.shape[0]):
            acc = acc + moved[i]
    if keepdims:
        acc = np.expand_dims(acc, axis)
    return acc


def fold_matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w`` for x (..., K), w (K, M), folding over K in order."""
    K = x.shape[-1]
    if K == 0:
        return np.zeros(x.shape[:-1] + (w.shape[1],))
    acc = x[..., 0, None] * w[0]
    for k in range(1, K):
        acc = acc + x[..., k, None] * w[k]
    return acc


def _apply(op, inputs, compute, backward, dtype) -> Tensor:
    out = Tensor(compute(), dtype)
    tape = current_tape()
    if tape is not None:
        tape.record(Node(op, tuple(inputs), out, backward, lambda: round_to(dtype, compute())))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x (..., K) @ w (K, M) + b (M)."""

    def compute():
        y = fold_matmul(x.data, w.data)
        return y if b is None else y + b.data

    def backward(g):
        x2 = x.data.reshape(-1, x.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ w.data.T
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _apply("linear", inputs, compute, backward, x.dtype)


def linear_t(x: Tensor, e: Tensor) -> Tensor:
    """x (..., K) @ e.T for e (V, K); the tied output projection."""

    def compute():
        return fold_matmul(x.data, e.data.T)

    def backward(g):
        x2 = x.data.reshape(-1, x.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        return g @ e.data, g2.T @ x2

    return _apply("linear_t", (x, e), compute, backward, x.dtype)


def add(a: Tensor, b: Tensor) -> Tensor:
    def compute():
        return a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _apply("add", (a, b), compute, backward, a.dtype)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def compute():
        return a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _apply("mul", (a, b), compute, backward, a.dtype)


def add_const(x: Tensor, c: np.ndarray) -> Tensor:
    c = np.asarray(c, dtype=np.float64)

    def compute():
        return x.data + c

    return _apply("add_const", (x,), compute, lambda g: (g,), x.dtype)


def scale(x: Tensor, c: float) -> Tensor:
    def compute():
        return x.data * c

    return _apply("scale", (x,), compute, lambda g: (g * c,), x.dtype)


def embedding(ids: np.ndarray, table: Tensor) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def compute():
        return table.data[ids]

    def backward(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _apply("embedding", (table,), compute, backward, table.dtype)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]

    def stats():
        mean = fold_sum(x.data, -1, keepdims=True) / d
        xc = x.data - mean
        var = fold_sum(xc * xc, -1, keepdims=True) / d
        rstd = 1.0 / np.sqrt(var + eps)
        return xc * rstd, rstd

    def compute():
        xhat, _ = stats()
        return xhat * gain.data + bias.data

    def backward(g):
        xhat, rstd = stats()
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        gx_hat = g * gain.data
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggain, gbias

    return _apply("layer_norm", (x, gain, bias), compute, backward, x.dtype)


def relu(x: Tensor) -> Tensor:
    def compute():
        return np.maximum(x.data, 0.0)

    return _apply("relu", (x,), compute, lambda g: (g * (x.data > 0),), x.dtype)


def dropout(x: Tensor, keep: np.ndarray, p: float) -> Tensor:
    """Inverted dropout with a caller-drawn boolean keep mask."""
    factor = np.where(keep, 1.0 / (1.0 - p), 0.0)

    def compute():
        return x.data * factor

    return _apply("dropout", (x,), compute, lambda g: (g * factor,), x.dtype)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, T, D) -> (B, H, T, D/H)."""
    B, T, D = x.shape

    def compute():
        return x.data.reshape(B, T, heads, D // heads).transpose(0, 2, 1, 3)

    def backward(g):
        return (g.transpose(0, 2, 1, 3).reshape(B, T, D),)

    return _apply("split_heads", (x,), compute, backward, x.dtype)


def merge_heads(x: Tensor) -> Tensor:
    """(B, H, T, dh) -> (B, T, H*dh)."""
    B, H, T, dh = x.shape

    def compute():
        return x.data.transpose(0, 2, 1, 3).reshape(B, T, H * dh)

    def backward(g):
        return (g.reshape(B, T, H, dh).transpose(0, 2, 1, 3),)

    return _apply("merge_heads", (x,), compute, backward, x.dtype)


def concat_time(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along axis 2 (the time axis of (B, H, T, dh))."""
    n = a.shape[2]

    def compute():
        return np.concatenate([a.data, b.data], axis=2)

    def backward(g):
        return g[:, :, :n], g[:, :, n:]

    return _apply("concat_time", (a, b), compute, backward, a.dtype)


def attention_probs(
    q: np.ndarray, k: np.ndarray, key_padding_mask: Optional[np.ndarray] = None, causal: bool = False
) -> np.ndarray:
    """Softmax attention weights (B, H, Tq, Tk) in float64.

    ``key_padding_mask`` is (B, Tk), True at padded keys. With ``causal`` the
    query at row i sees keys 0..i.
    """
    dh = q.shape[-1]
    s = np.zeros(q.shape[:-1] + (k.shape[2],))
    if dh:
        s = q[..., :, 0, None] * k[..., None, :, 0]
        for d in range(1, dh):
            s = s + q[..., :, d, None] * k[..., None, :, d]
    s = s * (1.0 / math.sqrt(dh))
    blocked = np.zeros(s.shape, dtype=bool)
    if key_padding_mask is not None:
        blocked |= key_padding_mask[:, None, None, :]
    if causal:
        Tq, Tk = s.shape[-2:]
        blocked |= np.triu(np.ones((Tq, Tk), dtype=bool), k=1)
    s = np.where(blocked, -np.inf, s)
    if s.shape[-1] == 0:
        return s
    m = s.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)  # fully blocked rows attend to nothing
    e = np.exp(s - m)
    z = fold_sum(e, -1, keepdims=True)
    return e / np.where(z > 0.0, z, 1.0)


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    key_padding_mask: Optional[np.ndarray] = None,
    causal: bool = False,
) -> Tensor:
    """Scaled dot-product attention on (B, H, T, dh) tensors."""
    scale_ = 1.0 / math.sqrt(q.shape[-1])

    def compute():
        p = attention_probs(q.data, k.data, key_padding_mask, causal)
        Tk = k.shape[2]
        if Tk == 0:
            return np.zeros(q.shape)
        acc = p[..., :, 0, None] * v.data[..., None, 0, :]
        for j in range(1, Tk):
            acc = acc + p[..., :, j, None] * v.data[..., None, j, :]
        return acc

    def backward(g):
        p = attention_probs(q.data, k.data, key_padding_mask, causal)
        gv = np.einsum("bhij,bhid->bhjd", p, g)
        gp = np.einsum("bhid,bhjd->bhij", g, v.data)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale_
        gq = np.einsum("bhij,bhjd->bhid", gs, k.data)
        gk = np.einsum("bhij,bhid->bhjd", gs, q.data)
        return gq, gk, gv

    return _apply("attention", (q, k, v), compute, backward, q.dtype)


def log_softmax_array(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    s = x - m
    return s - np.log(fold_sum(np.exp(s), -1, keepdims=True))


def log_softmax(x: Tensor) -> Tensor:
    def compute():
        return log_softmax_array(x.data)

    def backward(g):
        p = np.exp(log_softmax_array(x.data))
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _apply("log_softmax", (x,), compute, backward, x.dtype)


def weighted_nll(lprobs: Tensor, coef: np.ndarray) -> Tensor:
    """Scalar ``-sum(coef * lprobs)``; rows folded in order."""
    coef = np.asarray(coef, dtype=np.float64)

    def compute():
        lp = lprobs.data.reshape(-1, lprobs.shape[-1])
        c = coef.reshape(lp.shape)
        # zero coefficients must not turn -inf log-probs into NaN
        terms = np.where(c != 0.0, c * lp, 0.0)
        per_row = fold_sum(terms, -1)
        return np.asarray(-fold_sum(per_row, 0))

    def backward(g):
        return (-coef.reshape(lprobs.shape) * g,)

    return _apply("weighted_nll", (lprobs,), compute, backward, lprobs.dtype)


def sum_all(x: Tensor) -> Tensor:
    def compute():
        return np.asarray(deterministic_sum(x.data.reshape(-1)))

    return _apply("sum_all", (x,), compute, lambda g: (np.broadcast_to(g, x.shape).copy(),), x.dtype)


def cast(x: Tensor, dtype: DType) -> Tensor:
    return _apply("cast", (x,), lambda: x.data, lambda g: (g,), dtype)
