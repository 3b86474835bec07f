"""
Differentiable operations used by the encoder and the objectives.

No general broadcasting: shapes must match exactly, apart from bias-add and
scalar operands handled in ``tensor.add``/``tensor.mul``.
"""

from __future__ import annotations

import math
from typing import List, Optional, Sequence

import numpy as np

from utp.autograd.tensor import Tensor, add, mul, neg  # noqa: F401  (re-exported)
from utp.core.exceptions import ShapeError

# GELU tanh approximation constants.
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


# ==================== Linear algebra ====================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a [m×k] and b [k×n]."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data

    def backward(g: np.ndarray):
        return g @ b.data.T, a.data.T @ g

    return Tensor.from_op(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {a.shape}")
    return Tensor.from_op(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    src = a.shape
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


# ==================== Reductions ====================

def sum(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis)

    def backward(g: np.ndarray):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return Tensor.from_op(out, (a,), backward, "sum")


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


# ==================== Elementwise ====================

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return Tensor.from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign so neither branch overflows.
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5·x·(1 + tanh(c·(x + 0.044715·x³)))."""
    x = a.data
    inner = GELU_C * (x + GELU_A * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g: np.ndarray):
        d_inner = GELU_C * (1.0 + 3.0 * GELU_A * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return Tensor.from_op(out, (a,), backward, "gelu")


def dropout(a: Tensor, p: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when ``p`` is 0 or no generator is supplied."""
    if p <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= p).astype(np.float64) / (1.0 - p)
    return Tensor.from_op(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# ==================== Normalization / probability ====================

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g: np.ndarray):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, (x,), backward, "log_softmax")


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize over the last dimension, then scale by ``gain`` and shift by ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm: gain {gain.shape} / bias {bias.shape} must match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def backward(g: np.ndarray):
        dxhat = g * gain.data
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, d)
        dgain = (flat_g * xhat.reshape(-1, d)).sum(axis=0)
        dbias = flat_g.sum(axis=0)
        return dx, dgain, dbias

    return Tensor.from_op(out, (x, gain, bias), backward, "layernorm")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of a matrix to unit Euclidean norm."""
    if x.ndim != 2:
        raise ShapeError(f"l2_normalize expects a matrix, got {x.shape}")
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True)) + eps
    out = x.data / norm

    def backward(g: np.ndarray):
        return ((g - out * (g * out).sum(axis=1, keepdims=True)) / norm,)

    return Tensor.from_op(out, (x,), backward, "l2_normalize")


# ==================== Losses ====================

def cross_entropy(logits: Tensor, targets: Sequence[int], ignore_index: int = -100) -> Tensor:
    """
    Mean negative log-likelihood of ``targets`` under row-wise softmax of ``logits``.

    Positions whose target equals ``ignore_index`` are skipped. If every
    position is ignored the loss is exactly 0 with a zero gradient.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [n×V] logits, got {logits.shape}")
    n, vocab = logits.shape
    targets = np.asarray(list(targets), dtype=np.int64)
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} logit rows but {targets.shape[0]} targets")
    valid = targets != ignore_index
    if np.any((targets[valid] < 0) | (targets[valid] >= vocab)):
        raise ShapeError(f"cross_entropy: target outside [0, {vocab})")
    n_valid = int(valid.sum())
    if n_valid == 0:
        return Tensor.from_op(np.float64(0.0), (logits,), lambda g: (np.zeros_like(logits.data),), "cross_entropy")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.nonzero(valid)[0]
    loss = -logp[rows, targets[rows]].sum() / n_valid

    def backward(g: np.ndarray):
        grad = np.zeros_like(logits.data)
        grad[rows] = np.exp(logp[rows])
        grad[rows, targets[rows]] -= 1.0
        return (grad * (g / n_valid),)

    return Tensor.from_op(np.float64(loss), (logits,), backward, "cross_entropy")


def binary_cross_entropy(probs: Tensor, targets: Sequence[float], clip: float = 1e-12) -> Tensor:
    """Mean binary cross-entropy; probabilities are clipped to [clip, 1 − clip]."""
    y = np.asarray(list(targets), dtype=np.float64)
    if y.shape != probs.shape:
        raise ShapeError(f"binary_cross_entropy: probs {probs.shape} vs targets {y.shape}")
    p = np.clip(probs.data, clip, 1.0 - clip)
    n = max(p.size, 1)
    loss = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum() / n
    inside = (probs.data > clip) & (probs.data < 1.0 - clip)

    def backward(g: np.ndarray):
        return (g * inside * (-(y / p) + (1.0 - y) / (1.0 - p)) / n,)

    return Tensor.from_op(np.float64(loss), (probs,), backward, "binary_cross_entropy")


# ==================== Indexing / assembly ====================

def take_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of a matrix (embedding lookup); gradients scatter-add back."""
    idx = np.asarray(list(ids), dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"take_rows expects a matrix, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"take_rows: index outside [0, {table.shape[0]})")

    def backward(g: np.ndarray):
        grad = np.zeros_like(table.data)
        np.add.at(grad, idx, g)
        return (grad,)

    return Tensor.from_op(table.data[idx], (table,), backward, "take_rows")


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_cols: [{start}:{stop}] invalid for {x.shape}")

    def backward(g: np.ndarray):
        grad = np.zeros_like(x.data)
        grad[:, start:stop] = g
        return (grad,)

    return Tensor.from_op(x.data[:, start:stop].copy(), (x,), backward, "slice_cols")


def concat(tensors: List[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: {t.shape} does not line up with {ref} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g: np.ndarray):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor.from_op(out, tuple(tensors), backward, "concat")


def stack(vectors: List[Tensor]) -> Tensor:
    """Stack N vectors of shape [d] into an [N×d] matrix."""
    if not vectors:
        raise ShapeError("stack of an empty list")
    d = vectors[0].shape
    for v in vectors:
        if v.shape != d or v.ndim != 1:
            raise ShapeError(f"stack: expected vectors of shape {d}, got {v.shape}")
    out = np.stack([v.data for v in vectors], axis=0)

    def backward(g: np.ndarray):
        return tuple(g[i] for i in range(len(vectors)))

    return Tensor.from_op(out, tuple(vectors), backward, "stack")


def weighted_row_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Σ_i weights[i]·x[i] for a matrix x; ``weights`` is a constant."""
    w = np.asarray(weights, dtype=np.float64)
    if x.ndim != 2 or w.shape != (x.shape[0],):
        raise ShapeError(f"weighted_row_sum: weights {w.shape} vs rows of {x.shape}")
    return Tensor.from_op(w @ x.data, (x,), lambda g: (np.outer(w, g),), "weighted_row_sum")
