"""Multi-stage answer generator.

The query vector and retrieved contexts are fused into ``z`` (``y_0``). Stage
``s`` attends from ``y_{s-1}`` over a key/value bank made of the fusion rows
(query then contexts) and every earlier intermediate ``y_0 .. y_{s-1}``, then
applies a dense tanh layer with a residual connection. A linear head maps the
last intermediate to logits over a closed answer vocabulary.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ParameterError, ShapeError
from .numerics import scaled_dot_attention, scaled_dot_attention_backward


@dataclass(frozen=True)
class GeneratorConfig:
    S: int = 3
    d: int = 64
    C: int = 64
    d_k: int = 32

    def __post_init__(self):
        if self.S < 1 or self.C < 2 or not 1 <= self.d_k <= self.d:
            raise ParameterError(f"invalid generator config {self}")


@dataclass
class StageParams:
    w_q: np.ndarray  # d x d_k
    w_k: np.ndarray  # d x d_k
    w_v: np.ndarray  # d x d
    w_out: np.ndarray  # d x d
    b_out: np.ndarray  # d

    @classmethod
    def init(cls, rng, cfg: GeneratorConfig):
        d, dk = cfg.d, cfg.d_k
        return cls(
            w_q=rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, dk)),
            w_k=rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, dk)),
            w_v=rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d)),
            w_out=rng.normal(0.0, 0.5 / np.sqrt(d), size=(d, d)),
            b_out=np.zeros(d),
        )


@dataclass
class FusionParams:
    w_f: np.ndarray  # d x 2d
    b_f: np.ndarray  # d

    @classmethod
    def init(cls, rng, d: int):
        return cls(rng.normal(0.0, 1.0 / np.sqrt(2 * d), size=(d, 2 * d)), np.zeros(d))


@dataclass
class OutputHead:
    w_o: np.ndarray  # C x d
    b_o: np.ndarray  # C

    @classmethod
    def init(cls, rng, cfg: GeneratorConfig):
        return cls(rng.normal(0.0, 1.0 / np.sqrt(cfg.d), size=(cfg.C, cfg.d)), np.zeros(cfg.C))


@dataclass
class StageTrace:
    z: np.ndarray
    intermediates: list = field(default_factory=list)  # y_1 .. y_S
    attention_weights: list = field(default_factory=list)
    # backward caches
    q_vec: np.ndarray | None = None
    cbar: np.ndarray | None = None
    kv_rows: np.ndarray | None = None
    banks: list = field(default_factory=list)
    queries: list = field(default_factory=list)
    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)
    attended: list = field(default_factory=list)
    activations: list = field(default_factory=list)

    @property
    def ys(self) -> list:
        return [self.z] + list(self.intermediates)


def _check_vec(v, d, what):
    if v.shape != (d,):
        raise ShapeError(f"{what} has shape {v.shape}, expected ({d},)")


def fuse_context(q_vec, contexts: Sequence[np.ndarray], fusion: FusionParams):
    """Return ``(z, kv_rows)`` with z = tanh(w_f [q ; mean(contexts)] + b_f).

    The mean of no contexts is the zero vector; kv_rows stacks q then contexts.
    """
    z, kv_rows, _ = _fuse(q_vec, contexts, fusion)
    return z, kv_rows


def _fuse(q_vec, contexts, fusion: FusionParams):
    q_vec = np.asarray(q_vec, dtype=np.float64)
    d = fusion.b_f.shape[0]
    _check_vec(q_vec, d, "query vector")
    if len(contexts):
        ctx = np.asarray(contexts, dtype=np.float64).reshape(len(contexts), -1)
        if ctx.shape[1] != d:
            raise ShapeError(f"context rows have dim {ctx.shape[1]}, expected {d}")
        cbar = ctx.mean(axis=0)
        kv_rows = np.vstack([q_vec[None, :], ctx])
    else:
        cbar = np.zeros(d)
        kv_rows = q_vec[None, :].copy()
    z = np.tanh(fusion.w_f @ np.concatenate([q_vec, cbar]) + fusion.b_f)
    return z, kv_rows, cbar


def run_stage(y_prev, kv_bank, p: StageParams):
    """One cascade step; returns ``(y_s, cache)``."""
    qv = y_prev @ p.w_q
    K = kv_bank @ p.w_k
    V = kv_bank @ p.w_v
    a, w = scaled_dot_attention(qv[None, :], K, V, return_weights=True)
    a = a[0]
    t = np.tanh(p.w_out @ a + p.b_out)
    return t + y_prev, (qv, K, V, w[0], a, t)


def generate(q_vec, contexts, fusion: FusionParams, stages: Sequence[StageParams], head: OutputHead):
    """Run the full cascade; returns ``(logits, trace)``."""
    z, kv_rows, cbar = _fuse(q_vec, contexts, fusion)
    trace = StageTrace(z=z, q_vec=np.asarray(q_vec, dtype=np.float64), cbar=cbar, kv_rows=kv_rows)
    ys = [z]
    for p in stages:
        bank = np.vstack([kv_rows, np.asarray(ys)])
        y, (qv, K, V, w, a, t) = run_stage(ys[-1], bank, p)
        ys.append(y)
        trace.intermediates.append(y)
        trace.attention_weights.append(w)
        trace.banks.append(bank)
        trace.queries.append(qv)
        trace.keys.append(K)
        trace.values.append(V)
        trace.attended.append(a)
        trace.activations.append(t)
    logits = head.w_o @ ys[-1] + head.b_o
    return logits, trace


def generate_backward(dlogits, trace: StageTrace, fusion: FusionParams, stages, head: OutputHead, grads: dict):
    """Accumulate parameter gradients into ``grads``; return d(loss)/d(q_vec)."""
    S = len(stages)
    ys = trace.ys
    grads["head.w_o"] += np.outer(dlogits, ys[-1])
    grads["head.b_o"] += dlogits
    dys = [np.zeros_like(trace.z) for _ in range(S + 1)]
    dys[S] = head.w_o.T @ dlogits
    n_kv = trace.kv_rows.shape[0]
    dkv = np.zeros_like(trace.kv_rows)
    for s in range(S, 0, -1):
        p = stages[s - 1]
        pre = f"stage{s}."
        dy = dys[s]
        qv, K, V = trace.queries[s - 1], trace.keys[s - 1], trace.values[s - 1]
        w, a, t = trace.attention_weights[s - 1], trace.attended[s - 1], trace.activations[s - 1]
        bank = trace.banks[s - 1]
        dys[s - 1] += dy  # residual
        dh = dy * (1.0 - t * t)
        grads[pre + "w_out"] += np.outer(dh, a)
        grads[pre + "b_out"] += dh
        da = p.w_out.T @ dh
        dqv, dK, dV = scaled_dot_attention_backward(da[None, :], qv[None, :], K, V, w[None, :])
        dqv = dqv[0]
        grads[pre + "w_q"] += np.outer(ys[s - 1], dqv)
        dys[s - 1] += p.w_q @ dqv
        grads[pre + "w_k"] += bank.T @ dK
        grads[pre + "w_v"] += bank.T @ dV
        dbank = dK @ p.w_k.T + dV @ p.w_v.T
        dkv += dbank[:n_kv]
        for j in range(s):
            dys[j] += dbank[n_kv + j]
    dz = dys[0]
    du = dz * (1.0 - trace.z**2)
    grads["fusion.w_f"] += np.outer(du, np.concatenate([trace.q_vec, trace.cbar]))
    grads["fusion.b_f"] += du
    d = trace.q_vec.shape[0]
    return (fusion.w_f.T @ du)[:d] + dkv[0]


@dataclass
class BatchTrace:
    Q: np.ndarray  # B x d
    Cbar: np.ndarray
    Z: np.ndarray
    kv: np.ndarray  # B x (1+M) x d
    kv_mask: np.ndarray  # B x (1+M)
    ys: list = field(default_factory=list)  # y_0 .. y_S, each B x d
    stage_cache: list = field(default_factory=list)


def pad_contexts(contexts: Sequence[np.ndarray], d: int):
    """Stack ragged per-example context matrices into (B, M, d) plus a mask."""
    B = len(contexts)
    M = max((len(c) for c in contexts), default=0)
    ctx = np.zeros((B, M, d))
    mask = np.zeros((B, M), dtype=bool)
    for i, c in enumerate(contexts):
        if len(c):
            ctx[i, : len(c)] = c
            mask[i, : len(c)] = True
    return ctx, mask


def generate_batch(Q, contexts: Sequence[np.ndarray], fusion: FusionParams, stages, head: OutputHead):
    """Row-wise equivalent of :func:`generate` for a batch of queries.

    Ragged context lists are zero-padded and the padding is excluded from
    attention, so each row matches the single-example cascade.
    """
    Q = np.asarray(Q, dtype=np.float64)
    B, d = Q.shape
    ctx, cmask = pad_contexts(contexts, d)
    counts = cmask.sum(axis=1)
    Cbar = ctx.sum(axis=1) / np.maximum(counts, 1)[:, None]
    Z = np.tanh(np.concatenate([Q, Cbar], axis=1) @ fusion.w_f.T + fusion.b_f)
    kv = np.concatenate([Q[:, None, :], ctx], axis=1)
    kv_mask = np.concatenate([np.ones((B, 1), dtype=bool), cmask], axis=1)
    tr = BatchTrace(Q, Cbar, Z, kv, kv_mask, ys=[Z])
    for p in stages:
        bank = np.concatenate([kv, np.stack(tr.ys, axis=1)], axis=1)
        mask = np.concatenate([kv_mask, np.ones((B, len(tr.ys)), dtype=bool)], axis=1)
        y_prev = tr.ys[-1]
        qv = y_prev @ p.w_q
        K = bank @ p.w_k
        V = bank @ p.w_v
        scores = np.einsum("bk,brk->br", qv, K) / np.sqrt(K.shape[2])
        scores = np.where(mask, scores, -np.inf)
        scores -= scores.max(axis=1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=1, keepdims=True)
        a = np.einsum("br,brd->bd", w, V)
        t = np.tanh(a @ p.w_out.T + p.b_out)
        tr.ys.append(t + y_prev)
        tr.stage_cache.append((bank, qv, K, V, w, a, t))
    logits = tr.ys[-1] @ head.w_o.T + head.b_o
    return logits, tr


def generate_batch_backward(dlogits, tr: BatchTrace, fusion: FusionParams, stages, head: OutputHead, grads: dict):
    """Accumulate gradients of a batch; return d(loss)/dQ as a B x d array."""
    S = len(stages)
    B, d = tr.Q.shape
    grads["head.w_o"] += dlogits.T @ tr.ys[-1]
    grads["head.b_o"] += dlogits.sum(axis=0)
    dys = [np.zeros((B, d)) for _ in range(S + 1)]
    dys[S] = dlogits @ head.w_o
    n_kv = tr.kv.shape[1]
    dkv0 = np.zeros((B, d))
    for s in range(S, 0, -1):
        p = stages[s - 1]
        pre = f"stage{s}."
        bank, qv, K, V, w, a, t = tr.stage_cache[s - 1]
        dy = dys[s]
        dys[s - 1] += dy
        dh = dy * (1.0 - t * t)
        grads[pre + "w_out"] += dh.T @ a
        grads[pre + "b_out"] += dh.sum(axis=0)
        da = dh @ p.w_out
        dw = np.einsum("bd,brd->br", da, V)
        dV = w[:, :, None] * da[:, None, :]
        dscores = w * (dw - (dw * w).sum(axis=1, keepdims=True))
        scale = 1.0 / np.sqrt(K.shape[2])
        dqv = np.einsum("br,brk->bk", dscores, K) * scale
        dK = dscores[:, :, None] * qv[:, None, :] * scale
        grads[pre + "w_q"] += tr.ys[s - 1].T @ dqv
        dys[s - 1] += dqv @ p.w_q.T
        flat_bank = bank.reshape(-1, d)
        grads[pre + "w_k"] += flat_bank.T @ dK.reshape(-1, dK.shape[2])
        grads[pre + "w_v"] += flat_bank.T @ dV.reshape(-1, d)
        dbank = dK @ p.w_k.T + dV @ p.w_v.T
        dkv0 += dbank[:, 0]
        for j in range(s):
            dys[j] += dbank[:, n_kv + j]
    du = dys[0] * (1.0 - tr.Z**2)
    grads["fusion.w_f"] += du.T @ np.concatenate([tr.Q, tr.Cbar], axis=1)
    grads["fusion.b_f"] += du.sum(axis=0)
    return du @ fusion.w_f[:, :d] + dkv0
