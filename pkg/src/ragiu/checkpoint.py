"""Binary checkpoints of a model together with its memory bank and index.

Layout (all little-endian): the 6-byte magic ``RAGIU1``, a version byte, a
header of u32 dimensions ``d V S C d_k K L``, the remaining model settings,
then every parameter array as raw float64 in ``CoreModel.parameters()`` order,
the memory bank cells and the index. Strings are u32-length-prefixed UTF-8.
"""
from __future__ import annotations

import io
import struct
from collections import deque
from pathlib import Path

import numpy as np

from .errors import FormatError
from .memory import MemoryBank, MemoryCell, Sample
from .retrieval import HierarchicalIndex
from .trainer import CoreModel, ModelConfig, RAGSystem

MAGIC = b"RAGIU1"
VERSION = 1
_NONE = 0xFFFFFFFF


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def pack(self, fmt: str, *vals):
        self.buf.write(struct.pack("<" + fmt, *vals))

    def u32(self, v: int | None):
        self.pack("I", _NONE if v is None else v)

    def u64(self, v: int):
        self.pack("Q", v)

    def f64(self, v: float):
        self.pack("d", v)

    def text(self, s: str):
        b = s.encode("utf-8")
        self.u32(len(b))
        self.buf.write(b)

    def array(self, a, dtype="<f8"):
        self.buf.write(np.ascontiguousarray(a, dtype=dtype).tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"checkpoint truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def u32(self, optional: bool = False):
        (v,) = self.unpack("I")
        return None if optional and v == _NONE else v

    def u64(self) -> int:
        return self.unpack("Q")[0]

    def f64(self) -> float:
        return self.unpack("d")[0]

    def text(self) -> str:
        n = self.u32()
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"bad string in checkpoint at byte {self.pos}") from exc

    def array(self, shape, dtype="<f8") -> np.ndarray:
        dt = np.dtype(dtype)
        n = int(np.prod(shape))
        return np.frombuffer(self.take(n * dt.itemsize), dtype=dt).astype(dt.newbyteorder("="), copy=True).reshape(shape)


def _write_sample(w: _Writer, s: Sample):
    w.text(s.text)
    w.u32(s.label)
    w.text(s.key)
    w.u32(len(s.queries))
    for q in s.queries:
        w.text(q)


def _read_sample(r: _Reader) -> Sample:
    text = r.text()
    label = r.u32()
    key = r.text()
    queries = tuple(r.text() for _ in range(r.u32()))
    return Sample(text, label, key, queries)


def dumps(system: RAGSystem) -> bytes:
    model, bank, index = system.model, system.bank, system.index
    cfg = model.cfg
    w = _Writer()
    w.buf.write(MAGIC)
    w.pack("B", VERSION)
    K = 0 if index is None else index.K
    for v in (cfg.d, cfg.vocab_size, cfg.stages, cfg.answer_vocab, cfg.d_k, K, cfg.gate_layers):
        w.u32(v)
    w.f64(cfg.gate_threshold)
    w.f64(cfg.gate_bias)
    for v in (cfg.memory_capacity, cfg.retrieval_k, cfg.clusters, cfg.top_p):
        w.u32(v)
    w.u64(model.revision)
    for arr in model.parameters().values():
        w.array(arr)
    w.u64(bank.revision)
    w.u64(bank.next_id)
    w.u32(bank.size)
    for c in bank.cells:
        w.u64(c.id)
        w.u64(c.inserted_at)
        w.array(c.vector)
        _write_sample(w, c.sample)
    w.pack("B", index is not None)
    if index is not None:
        w.u64(index.built_at)
        w.u64(index.revision)
        w.u32(index.requested_k)
        w.u32(len(index.ids))
        w.array(index.centroids)
        w.array(index.ids, "<i8")
        w.array(index.labels, "<i8")
        w.array(index.vectors)
    return w.buf.getvalue()


def loads(data: bytes) -> RAGSystem:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError("not a checkpoint: bad magic")
    (version,) = r.unpack("B")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    d, V, S, C, d_k, K, L = (r.u32() for _ in range(7))
    threshold, bias = r.f64(), r.f64()
    capacity, k, clusters = r.u32(), r.u32(), r.u32(optional=True)
    top_p = r.u32(optional=True)
    try:
        cfg = ModelConfig(
            d=d, vocab_size=V, stages=S, d_k=d_k, answer_vocab=C, gate_layers=L,
            gate_threshold=threshold, gate_bias=bias, memory_capacity=capacity,
            retrieval_k=k, clusters=clusters, top_p=top_p,
        )
    except ValueError as exc:
        raise FormatError(f"invalid checkpoint header: {exc}") from exc
    # build a skeleton of the right shapes, then overwrite every array
    model = CoreModel.init(cfg, np.random.default_rng(0))
    model.revision = r.u64()
    for arr in model.parameters().values():
        arr[...] = r.array(arr.shape)
    bank = MemoryBank(capacity, d)
    bank.revision = r.u64()
    bank.next_id = r.u64()
    cells = []
    for _ in range(r.u32()):
        cid, at = r.u64(), r.u64()
        vec = r.array((d,))
        cells.append(MemoryCell(cid, vec, at, _read_sample(r)))
    bank.cells = deque(cells)
    index = None
    (has_index,) = r.unpack("B")
    if has_index:
        built_at, revision = r.u64(), r.u64()
        requested_k = r.u32(optional=True)
        n = r.u32()
        centroids = r.array((K, d))
        ids = r.array((n,), "<i8")
        labels = r.array((n,), "<i8")
        vectors = r.array((n, d))
        index = HierarchicalIndex(centroids, ids, vectors, labels, built_at, revision, bank, requested_k)
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after checkpoint")
    return RAGSystem(model, bank, index)


def save(system: RAGSystem, path) -> None:
    Path(path).write_bytes(dumps(system))


def load(path) -> RAGSystem:
    return loads(Path(path).read_bytes())
