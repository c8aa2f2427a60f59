"""Hashed bag-of-words encoder and the capacity-bounded FIFO memory bank."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .errors import EmptyInputError, ParameterError, ShapeError

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@lru_cache(maxsize=65536)
def token_ids(text: str, vocab_size: int) -> tuple[int, ...]:
    return tuple(fnv1a_64(t.encode("utf-8")) % vocab_size for t in tokenize(text))


@dataclass
class EncoderParams:
    embed: np.ndarray  # V x d
    w_enc: np.ndarray  # d x d
    b_enc: np.ndarray  # d

    def __post_init__(self):
        V, d = self.embed.shape
        if V < 1 or d < 1 or self.w_enc.shape != (d, d) or self.b_enc.shape != (d,):
            raise ShapeError(
                f"inconsistent encoder shapes {self.embed.shape}, {self.w_enc.shape}, {self.b_enc.shape}"
            )

    @property
    def dim(self) -> int:
        return self.embed.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, d: int = 64, vocab_size: int = 4096):
        return cls(
            embed=rng.normal(0.0, 1.0, size=(vocab_size, d)),
            w_enc=rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d)),
            b_enc=np.zeros(d),
        )


class EncoderCache(NamedTuple):
    ids: tuple[int, ...]
    pooled: np.ndarray
    out: np.ndarray


def encode_forward(text: str, p: EncoderParams) -> EncoderCache:
    ids = token_ids(text, p.vocab_size)
    if not ids:
        raise EmptyInputError(f"no tokens in {text!r}")
    pooled = p.embed[list(ids)].mean(axis=0)
    return EncoderCache(ids, pooled, np.tanh(p.w_enc @ pooled + p.b_enc))


def encode(text: str, p: EncoderParams) -> np.ndarray:
    """Encode one sample as tanh(w_enc . meanpool(embed(tokens)) + b_enc)."""
    return encode_forward(text, p).out


def encode_backward(cache: EncoderCache, dout: np.ndarray, p: EncoderParams, grads: dict, prefix="encoder."):
    dpre = dout * (1.0 - cache.out**2)
    grads[prefix + "w_enc"] += np.outer(dpre, cache.pooled)
    grads[prefix + "b_enc"] += dpre
    dpooled = p.w_enc.T @ dpre / len(cache.ids)
    np.add.at(grads[prefix + "embed"], list(cache.ids), dpooled)


@dataclass(frozen=True)
class Sample:
    """A stored raw sample: document text plus the label and queries it answers."""

    text: str
    label: int
    key: str = ""
    queries: tuple[str, ...] = ()


@dataclass(frozen=True, eq=False)
class MemoryCell:
    id: int
    vector: np.ndarray
    inserted_at: int
    sample: Sample


class SnapshotEntry(NamedTuple):
    id: int
    vector: np.ndarray
    sample: Sample


@dataclass
class MemoryBank:
    """FIFO store holding at most ``capacity`` cells; the front is the oldest.

    ``revision`` counts every insert and is what indexes compare against to
    detect staleness. Single writer only.
    """

    capacity: int
    dim: int
    cells: deque = field(default_factory=deque)
    revision: int = 0
    next_id: int = 0

    def __post_init__(self):
        if self.capacity < 1:
            raise ParameterError(f"capacity must be positive, got {self.capacity}")

    @property
    def size(self) -> int:
        return len(self.cells)

    def __len__(self):
        return len(self.cells)

    def __iter__(self):
        return iter(self.cells)

    def new_cell(self, vector, sample: Sample) -> MemoryCell:
        cell = MemoryCell(self.next_id, np.array(vector, dtype=np.float64), self.revision, sample)
        self.next_id += 1
        return cell

    def insert(self, cell: MemoryCell) -> MemoryCell | None:
        """Append ``cell``; when full, evict and return the oldest cell."""
        if cell.vector.shape != (self.dim,):
            raise ShapeError(f"cell vector shape {cell.vector.shape} != ({self.dim},)")
        if self.cells and cell.id <= self.cells[-1].id:
            raise ParameterError(f"cell id {cell.id} is not newer than {self.cells[-1].id}")
        evicted = None
        if len(self.cells) >= self.capacity:
            evicted = self.cells.popleft()
        self.cells.append(cell)
        self.revision += 1
        self.next_id = max(self.next_id, cell.id + 1)
        return evicted

    def add(self, vector, sample: Sample) -> MemoryCell:
        cell = self.new_cell(vector, sample)
        self.insert(cell)
        return cell

    def snapshot(self) -> list[SnapshotEntry]:
        return [SnapshotEntry(c.id, c.vector.copy(), c.sample) for c in self.cells]

    def get(self, cell_id: int) -> MemoryCell:
        # ids are monotone, so bisect over the deque
        lo, hi = 0, len(self.cells)
        while lo < hi:
            mid = (lo + hi) // 2
            if self.cells[mid].id < cell_id:
                lo = mid + 1
            else:
                hi = mid
        if lo < len(self.cells) and self.cells[lo].id == cell_id:
            return self.cells[lo]
        raise KeyError(cell_id)

    def latest_by_key(self) -> dict[str, int]:
        """Map each sample key to the id of its newest cell."""
        out = {}
        for c in self.cells:
            out[c.sample.key] = c.id
        return out

    def copy(self) -> "MemoryBank":
        return MemoryBank(self.capacity, self.dim, deque(self.cells), self.revision, self.next_id)



class BatchEncoderCache(NamedTuple):
    ids: np.ndarray  # all token ids, concatenated
    owners: np.ndarray  # example index of each token id
    counts: np.ndarray
    pooled: np.ndarray
    out: np.ndarray


def encode_batch_forward(texts, p: EncoderParams) -> BatchEncoderCache:
    per = [token_ids(t, p.vocab_size) for t in texts]
    for t, ids in zip(texts, per):
        if not ids:
            raise EmptyInputError(f"no tokens in {t!r}")
    counts = np.array([len(ids) for ids in per])
    ids = np.fromiter((i for row in per for i in row), dtype=np.int64, count=int(counts.sum()))
    owners = np.repeat(np.arange(len(per)), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    pooled = np.add.reduceat(p.embed[ids], starts, axis=0) / counts[:, None]
    return BatchEncoderCache(ids, owners, counts, pooled, np.tanh(pooled @ p.w_enc.T + p.b_enc))


def encode_batch_backward(cache: BatchEncoderCache, dout, p: EncoderParams, grads: dict, prefix="encoder."):
    dpre = dout * (1.0 - cache.out**2)
    grads[prefix + "w_enc"] += dpre.T @ cache.pooled
    grads[prefix + "b_enc"] += dpre.sum(axis=0)
    dpooled = (dpre @ p.w_enc) / cache.counts[:, None]
    np.add.at(grads[prefix + "embed"], cache.ids, dpooled[cache.owners])
