"""Dense float64 math: softmax, cross-entropy, attention, their backward
passes, and a central-difference gradient checker.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Every function
here is pure.
"""
from __future__ import annotations

import math
from typing import Callable, Dict, Mapping

import numpy as np

from .errors import EmptyKeyError, ProbeError, ShapeError

Tensor = np.ndarray
GradientSet = Dict[str, np.ndarray]


def as_tensor(x) -> Tensor:
    return np.asarray(x, dtype=np.float64)


def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax(logits, axis: int = -1) -> Tensor:
    x = as_tensor(logits)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis of shape {x.shape}")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> Tensor:
    x = as_tensor(logits)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"log_softmax over empty axis of shape {x.shape}")
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def cross_entropy(logits, gold: int) -> float:
    x = as_tensor(logits)
    if x.ndim != 1:
        raise ShapeError(f"cross_entropy expects a vector, got shape {x.shape}")
    if not 0 <= gold < x.shape[0]:
        raise IndexError(f"gold label {gold} outside [0, {x.shape[0]})")
    # clamp tiny negative rounding
    return max(0.0, float(-log_softmax(x)[gold]))


def cross_entropy_grad(logits, gold: int) -> Tensor:
    """d/dlogits of cross_entropy: softmax minus one-hot."""
    g = softmax(logits)
    g[gold] -= 1.0
    return g


def sigmoid(x):
    x = as_tensor(x)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(x):
    x = as_tensor(x)
    return -np.logaddexp(0.0, -x)


def scaled_dot_attention(q, k, v, return_weights: bool = False):
    """softmax(q k^T / sqrt(d_k)) v for a single head without masking."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError(f"attention expects matrices, got {q.shape}, {k.shape}, {v.shape}")
    if k.shape[0] == 0:
        raise EmptyKeyError("attention needs at least one key")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query dim {q.shape} does not match key dim {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"{k.shape[0]} keys but {v.shape[0]} values")
    weights = softmax(q @ k.T / math.sqrt(k.shape[1]))
    out = weights @ v
    if return_weights:
        return out, weights
    return out


def scaled_dot_attention_backward(dout, q, k, v, weights):
    """Gradients (dq, dk, dv) of scaled_dot_attention given upstream dout."""
    scale = 1.0 / math.sqrt(k.shape[1])
    dv = weights.T @ dout
    dw = dout @ v.T
    dscores = weights * (dw - (dw * weights).sum(axis=-1, keepdims=True))
    dq = dscores @ k * scale
    dk = dscores.T @ q * scale
    return dq, dk, dv


def cosine(a, b) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b) / (na * nb)


def cosine_rows(q, rows):
    """Cosine of q against each row of rows; zero vectors score 0."""
    rows = np.atleast_2d(as_tensor(rows))
    # row-wise reductions so a row's score does not depend on its neighbours
    qn = math.sqrt(float((q * q).sum()))
    rn = np.sqrt((rows * rows).sum(axis=1))
    denom = qn * rn
    dots = (rows * q).sum(axis=1)
    out = np.zeros(rows.shape[0])
    nz = denom > 0
    out[nz] = dots[nz] / denom[nz]
    return out


def cosine_rows_grad_q(q, rows, cos, dcos):
    """Gradient w.r.t. q of sum_j dcos[j] * cos(q, rows[j])."""
    qn = float(np.linalg.norm(q))
    if qn == 0.0:
        return np.zeros_like(q)
    rn = np.linalg.norm(rows, axis=1)
    live = rn > 0
    if not live.any():
        return np.zeros_like(q)
    w = np.where(live, dcos / np.where(live, rn, 1.0) / qn, 0.0)
    return rows.T @ w - (dcos[live] @ cos[live]) * q / (qn * qn)


def zeros_like_params(params: Mapping[str, np.ndarray]) -> GradientSet:
    return {name: np.zeros_like(p) for name, p in params.items()}


def grad_check(
    loss_fn: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    h: float = 1e-5,
    max_probes: int | None = None,
    rng: np.random.Generator | None = None,
) -> Dict[str, float]:
    """Compare analytic ``grads`` with central differences of ``loss_fn``.

    ``params`` is perturbed in place and restored after each probe. The relative
    error of a component uses ``max(1, |analytic|, |numeric|)`` as denominator.
    When ``max_probes`` is set, at most that many components per parameter are
    probed, chosen by ``rng``. Returns the worst relative error per parameter.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    base = loss_fn(params)
    if not math.isfinite(base):
        raise ProbeError(f"loss is not finite at the base point: {base}")
    report: Dict[str, float] = {}
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        idx = np.arange(flat.size)
        if max_probes is not None and flat.size > max_probes:
            rng = rng if rng is not None else np.random.default_rng(0)
            idx = np.sort(rng.choice(flat.size, size=max_probes, replace=False))
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn(params)
            flat[i] = orig - h
            fm = loss_fn(params)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise ProbeError(f"non-finite loss while probing {name}[{i}]")
            numeric = (fp - fm) / (2.0 * h)
            analytic = float(gflat[i])
            err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            worst = max(worst, err)
        report[name] = worst
    return report
