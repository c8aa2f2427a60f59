"""Two-level retrieval over memory vectors.

A coarse k-means quantizer partitions the bank; a query probes the nearest
centroids and scans their postings exactly by cosine similarity. Learned
sigmoid gate layers then prune the candidates before generation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import EmptyIndexError, IndexStaleError, ParameterError, ShapeError
from .memory import MemoryBank
from .numerics import cosine_rows, cosine_rows_grad_q, log_sigmoid, log_softmax, sigmoid, softmax


def default_clusters(n: int) -> int:
    return max(1, math.ceil(math.sqrt(n)))


def default_probes(K: int) -> int:
    return max(1, math.ceil(K / 4))


def _sq_dists(X, C):
    # (n, K) squared euclidean distances, row-wise reductions only
    diff = X[:, None, :] - C[None, :, :]
    return (diff * diff).sum(axis=2)


def kmeans_pp_init(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0.0:
            # every remaining point coincides with a centroid
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rest[0]) if rest.size else chosen[-1]
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[chosen].copy()


def kmeans(X: np.ndarray, K: int, rng: np.random.Generator, max_iter: int = 50):
    """k-means++ seeding then Lloyd rounds until the assignment is a fixpoint.

    Returns ``(centroids, labels, objective_history)``. Labels are always the
    nearest centroid (lowest index on ties) for the returned centroids.
    """
    n = X.shape[0]
    if not 1 <= K <= n:
        raise ParameterError(f"need 1 <= K <= {n}, got K={K}")
    centroids = kmeans_pp_init(X, K, rng)
    labels = None
    history = []
    for _ in range(max_iter):
        d2 = _sq_dists(X, centroids)
        new_labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(K):
            members = labels == j
            if members.any():
                centroids[j] = X[members].mean(axis=0)
    d2 = _sq_dists(X, centroids)
    labels = d2.argmin(axis=1)
    history.append(float(d2[np.arange(n), labels].sum()))
    return centroids, labels, history


@dataclass(frozen=True, eq=False)
class HierarchicalIndex:
    centroids: np.ndarray  # K x d
    ids: np.ndarray  # cell ids in bank order
    vectors: np.ndarray  # rows aligned with ids
    labels: np.ndarray  # centroid index per row
    built_at: int  # bank revision of the last full k-means build
    revision: int  # bank revision the postings reflect
    bank: MemoryBank = field(repr=False)
    requested_k: int | None = None

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def assignments(self) -> dict[int, int]:
        return {int(i): int(c) for i, c in zip(self.ids, self.labels)}

    @property
    def postings(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.K)]
        for i, c in zip(self.ids, self.labels):
            out[c].append(int(i))
        return out

    def is_stale(self) -> bool:
        return self.revision != self.bank.revision


def build_index(bank: MemoryBank, K: int | None = None, seed=0) -> HierarchicalIndex:
    if bank.size == 0:
        raise EmptyIndexError("cannot index an empty memory bank")
    k = default_clusters(bank.size) if K is None else K
    if not 1 <= k <= bank.size:
        raise ParameterError(f"cluster count {k} outside [1, {bank.size}]")
    ids = np.fromiter((c.id for c in bank.cells), dtype=np.int64, count=bank.size)
    X = np.stack([c.vector for c in bank.cells])
    centroids, labels, _ = kmeans(X, k, np.random.default_rng(seed))
    return HierarchicalIndex(centroids, ids, X, labels, bank.revision, bank.revision, bank, K)


def refresh_index(index: HierarchicalIndex, bank: MemoryBank | None = None, seed=0) -> HierarchicalIndex:
    """Bring ``index`` in line with its bank.

    Rebuilds from scratch once more than capacity/4 inserts have happened since
    the last build; otherwise drops evicted cells and assigns new ones to the
    nearest existing centroid.
    """
    bank = index.bank if bank is None else bank
    if bank.revision == index.revision and bank is index.bank:
        return index
    if bank.size == 0:
        raise EmptyIndexError("cannot index an empty memory bank")
    if bank.revision - index.built_at > bank.capacity / 4:
        k = index.requested_k
        if k is not None:
            k = min(k, bank.size)
        return build_index(bank, k, seed)
    keep = {int(i): row for row, i in enumerate(index.ids)}
    ids, vecs, labels = [], [], []
    fresh = []
    for c in bank.cells:
        row = keep.get(c.id)
        ids.append(c.id)
        vecs.append(c.vector)
        if row is None:
            fresh.append(len(labels))
            labels.append(-1)
        else:
            labels.append(int(index.labels[row]))
    X = np.stack(vecs)
    labels = np.asarray(labels, dtype=np.int64)
    if fresh:
        labels[fresh] = _sq_dists(X[fresh], index.centroids).argmin(axis=1)
    return HierarchicalIndex(
        index.centroids, np.asarray(ids, dtype=np.int64), X, labels,
        index.built_at, bank.revision, bank, index.requested_k,
    )


@dataclass
class RetrievalResult:
    ids: np.ndarray
    scores: np.ndarray  # cosine similarity, descending
    vectors: np.ndarray
    gate_trace: list = field(default_factory=list)
    gold_rank: int | None = None

    @property
    def candidates(self) -> list[tuple[int, float]]:
        return [(int(i), float(s)) for i, s in zip(self.ids, self.scores)]

    def __len__(self):
        return len(self.ids)


def rank_order(ids, scores) -> np.ndarray:
    """Positions sorted by descending score, ties by ascending id."""
    return np.lexsort((np.asarray(ids), -np.asarray(scores)))


def query(index: HierarchicalIndex, q, top_p: int | None = None, k: int = 5, gold_id: int | None = None) -> RetrievalResult:
    if index.is_stale():
        raise IndexStaleError(
            f"index reflects bank revision {index.revision} but bank is at {index.bank.revision}; refresh it"
        )
    if len(index.ids) == 0:
        raise EmptyIndexError("index holds no cells")
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (index.vectors.shape[1],):
        raise ShapeError(f"query shape {q.shape} does not match index dim {index.vectors.shape[1]}")
    p = default_probes(index.K) if top_p is None else top_p
    if p < 1 or k < 1:
        raise ParameterError("top_p and k must be >= 1")
    cd = ((index.centroids - q) ** 2).sum(axis=1)
    probed = np.argsort(cd, kind="stable")[:p]
    if p >= index.K:
        rows = np.arange(len(index.ids))
    else:
        rows = np.flatnonzero(np.isin(index.labels, probed))
    ids = index.ids[rows]
    scores = cosine_rows(q, index.vectors[rows])
    order = rank_order(ids, scores)[:k]
    rows = rows[order]
    result = RetrievalResult(index.ids[rows], scores[order], index.vectors[rows])
    if gold_id is not None:
        hit = np.flatnonzero(result.ids == gold_id)
        result.gold_rank = int(hit[0]) if hit.size else None
    return result


def brute_force_topk(index: HierarchicalIndex, q, k: int = 5) -> RetrievalResult:
    return query(index, q, top_p=index.K, k=k)


@dataclass
class GateStack:
    w: np.ndarray  # L x 3d
    b: np.ndarray  # L
    threshold: float = 0.5

    def __post_init__(self):
        if self.w.ndim != 2 or self.w.shape[0] < 1 or self.w.shape[1] % 3:
            raise ShapeError(f"gate weights must be L x 3d, got {self.w.shape}")
        if self.b.shape != (self.w.shape[0],):
            raise ShapeError(f"gate biases {self.b.shape} do not match {self.w.shape[0]} layers")
        if not 0.0 < self.threshold < 1.0:
            raise ParameterError(f"gate threshold must lie in (0, 1), got {self.threshold}")

    @property
    def layers(self) -> int:
        return self.w.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, layers: int = 2, threshold: float = 0.5, bias: float = 2.0):
        return cls(rng.normal(0.0, 0.01, size=(layers, 3 * d)), np.full(layers, float(bias)), threshold)


def gate_preactivations(q, C, gates: GateStack) -> np.ndarray:
    """(n, L) pre-sigmoid gate values for candidate rows C."""
    d = q.shape[0]
    wq, wc, wqc = gates.w[:, :d], gates.w[:, d : 2 * d], gates.w[:, 2 * d :]
    return (wq @ q)[None, :] + C @ wc.T + (C * q) @ wqc.T + gates.b[None, :]


def gate_filter(result: RetrievalResult, q, gates: GateStack) -> RetrievalResult:
    """Pass candidates through the gate layers in order, never emptying the set."""
    if len(result) == 0:
        raise ParameterError("gate_filter needs at least one candidate")
    q = np.asarray(q, dtype=np.float64)
    scores = sigmoid(gate_preactivations(q, result.vectors, gates))
    alive = np.arange(len(result))
    trace = []
    for layer in range(gates.layers):
        s = scores[alive, layer]
        keep = s >= gates.threshold
        if not keep.any():
            keep = np.zeros_like(keep)
            keep[int(np.argmax(s))] = True
        alive = alive[keep]
        trace.append(int(alive.size))
    out = replace(
        result,
        ids=result.ids[alive],
        scores=result.scores[alive],
        vectors=result.vectors[alive],
        gate_trace=trace,
    )
    if result.gold_rank is not None:
        hit = np.flatnonzero(out.ids == result.ids[result.gold_rank])
        out.gold_rank = int(hit[0]) if hit.size else None
    return out


def retrieval_loss(scores: Sequence[float], gold: int) -> float:
    """Negative log-likelihood of the gold candidate under softmax(scores)."""
    s = np.asarray(scores, dtype=np.float64)
    if not 0 <= gold < s.shape[0]:
        raise IndexError(f"gold position {gold} outside [0, {s.shape[0]})")
    return max(0.0, float(-log_softmax(s)[gold]))


def retrieval_loss_grad(scores, gold: int) -> np.ndarray:
    g = softmax(scores)
    g[gold] -= 1.0
    return g


def gated_scores(q, C, gates: GateStack):
    """Retrieval logits cos(q, c) + sum over layers of log gate(q, c).

    Returns ``(logits, cos, pre)`` where ``pre`` is the (n, L) gate
    pre-activation matrix needed for the backward pass.
    """
    cos = cosine_rows(q, C)
    pre = gate_preactivations(q, C, gates)
    return cos + log_sigmoid(pre).sum(axis=1), cos, pre


def gated_scores_backward(dlogits, q, C, cos, pre, gates: GateStack):
    """Return (dq, dw, db) for upstream gradient ``dlogits`` of gated_scores."""
    d = q.shape[0]
    dq = cosine_rows_grad_q(q, C, cos, dlogits)
    dpre = dlogits[:, None] * (1.0 - sigmoid(pre))  # n x L
    # features per candidate: [q ; c ; q*c]
    dw = np.empty_like(gates.w)
    dw[:, :d] = np.outer(dpre.sum(axis=0), q)
    dw[:, d : 2 * d] = dpre.T @ C
    dw[:, 2 * d :] = dpre.T @ (C * q)
    db = dpre.sum(axis=0)
    wq, wqc = gates.w[:, :d], gates.w[:, 2 * d :]
    dq = dq + dpre.sum(axis=0) @ wq + ((dpre @ wqc) * C).sum(axis=0)
    return dq, dw, db
