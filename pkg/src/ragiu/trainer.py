"""Online update engine.

One update round encodes the arriving samples into memory, fine-tunes a
frozen teacher copy on them, then trains the core model on mixed batches of
replayed and new samples under

    l_total      = l_retrieval + lam * l_generation
    l_generation = l_ce + beta * l_kd

with plain gradient descent.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, fields
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, GradientSetError, NumericAbort, ParameterError
from .generator import FusionParams, GeneratorConfig, OutputHead, StageParams, generate, generate_batch, generate_batch_backward
from .memory import EncoderParams, MemoryBank, Sample, encode, encode_batch_backward, encode_batch_forward
from .numerics import log_softmax
from .retrieval import (
    GateStack,
    HierarchicalIndex,
    build_index,
    gate_filter,
    gated_scores,
    gated_scores_backward,
    query,
    refresh_index,
    retrieval_loss,
    retrieval_loss_grad,
)

KD_DIRECTIONS = ("student_teacher", "teacher_student")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    vocab_size: int = 4096
    stages: int = 3
    d_k: int = 32
    answer_vocab: int = 64
    gate_layers: int = 2
    gate_threshold: float = 0.5
    gate_bias: float = 2.0
    memory_capacity: int = 512
    retrieval_k: int = 5
    clusters: int | None = None  # None: ceil(sqrt(bank size))
    top_p: int | None = None  # None: ceil(K / 4)

    def __post_init__(self):
        if self.d < 1 or self.vocab_size < 1 or self.memory_capacity < 1 or self.retrieval_k < 1:
            raise ConfigError(f"invalid model config {self}")
        if self.gate_layers < 1:
            raise ConfigError("need at least one gate layer")
        self.generator_config()

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(S=self.stages, d=self.d, C=self.answer_vocab, d_k=self.d_k)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    beta: float = 1.0
    lam: float = 0.5
    tau: float = 2.0
    eta: float = 0.3
    batch_size: int = 16
    teacher_epochs: int = 3
    replay_fraction: float = 0.5
    epochs: int = 3  # passes over the new samples per round
    kd_direction: str = "student_teacher"
    kd_tau_squared: bool = False

    def __post_init__(self):
        if min(self.alpha, self.beta, self.lam) < 0:
            raise ConfigError("alpha, beta and lam must be non-negative")
        if self.tau <= 0 or self.eta < 0:
            raise ConfigError("tau must be positive and eta non-negative")
        if self.batch_size < 1 or self.teacher_epochs < 1 or self.epochs < 1:
            raise ConfigError("batch_size, teacher_epochs and epochs must be >= 1")
        if not 0.0 <= self.replay_fraction <= 1.0:
            raise ConfigError("replay_fraction must lie in [0, 1]")
        if self.kd_direction not in KD_DIRECTIONS:
            raise ConfigError(f"kd_direction must be one of {KD_DIRECTIONS}")

    def replace(self, **kw) -> "TrainConfig":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kw)
        return TrainConfig(**vals)


@dataclass
class CoreModel:
    cfg: ModelConfig
    encoder: EncoderParams
    fusion: FusionParams
    stages: list
    head: OutputHead
    gates: GateStack
    revision: int = 0

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "CoreModel":
        gcfg = cfg.generator_config()
        return cls(
            cfg=cfg,
            encoder=EncoderParams.init(rng, cfg.d, cfg.vocab_size),
            fusion=FusionParams.init(rng, cfg.d),
            stages=[StageParams.init(rng, gcfg) for _ in range(cfg.stages)],
            head=OutputHead.init(rng, gcfg),
            gates=GateStack.init(rng, cfg.d, cfg.gate_layers, cfg.gate_threshold, cfg.gate_bias),
        )

    def parameters(self) -> dict[str, np.ndarray]:
        """Named views of every trainable array, in a fixed order."""
        p = {
            "encoder.embed": self.encoder.embed,
            "encoder.w_enc": self.encoder.w_enc,
            "encoder.b_enc": self.encoder.b_enc,
            "fusion.w_f": self.fusion.w_f,
            "fusion.b_f": self.fusion.b_f,
        }
        for s, st in enumerate(self.stages, start=1):
            for name in ("w_q", "w_k", "w_v", "w_out", "b_out"):
                p[f"stage{s}.{name}"] = getattr(st, name)
        p["head.w_o"] = self.head.w_o
        p["head.b_o"] = self.head.b_o
        p["gates.w"] = self.gates.w
        p["gates.b"] = self.gates.b
        return p

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.parameters().items()}

    def clone(self) -> "CoreModel":
        return copy.deepcopy(self)


@dataclass(frozen=True, eq=False)
class TeacherModel:
    model: CoreModel
    created_at: int = 0

    @classmethod
    def freeze(cls, model: CoreModel, created_at: int = 0) -> "TeacherModel":
        frozen = model.clone()
        for arr in frozen.parameters().values():
            arr.flags.writeable = False
        return cls(frozen, created_at)

    def parameter_bytes(self) -> bytes:
        return b"".join(a.tobytes() for a in self.model.parameters().values())


class LossBreakdown(NamedTuple):
    l_ce: float
    l_kd: float
    l_retrieval: float
    l_generation: float
    l_total: float

    def as_dict(self) -> dict:
        return self._asdict()


def make_breakdown(l_ce, l_kd, l_retrieval, beta, lam) -> LossBreakdown:
    l_generation = l_ce + beta * l_kd
    return LossBreakdown(l_ce, l_kd, l_retrieval, l_generation, l_retrieval + lam * l_generation)


def combined_loss(l_ce: float, l_kd: float, alpha: float, beta: float) -> float:
    return alpha * l_ce + beta * l_kd


def _kl_rows(p_log, q_log):
    return (np.exp(p_log) * (p_log - q_log)).sum(axis=-1)


def kd_loss(student_logits, teacher_logits, tau: float, direction: str = "student_teacher") -> float:
    """Batch-summed KL between temperature-softened distributions.

    The default direction is KL(softmax(student/tau) || softmax(teacher/tau)).
    """
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    s = np.atleast_2d(np.asarray(student_logits, dtype=np.float64))
    t = np.atleast_2d(np.asarray(teacher_logits, dtype=np.float64))
    if s.shape != t.shape:
        raise ParameterError(f"student {s.shape} and teacher {t.shape} logits differ in shape")
    ls, lt = log_softmax(s / tau), log_softmax(t / tau)
    kl = _kl_rows(ls, lt) if direction == "student_teacher" else _kl_rows(lt, ls)
    return float(np.maximum(kl, 0.0).sum())


def kd_loss_grad(student_logits, teacher_logits, tau: float, direction: str = "student_teacher"):
    """Gradient of kd_loss with respect to the student logits (same shape)."""
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    ls, lt = log_softmax(s / tau), log_softmax(t / tau)
    p = np.exp(ls)
    if direction == "student_teacher":
        f = ls - lt
        kl = (p * f).sum(axis=-1, keepdims=True)
        return p * (f - kl) / tau
    return (p - np.exp(lt)) / tau


class Example(NamedTuple):
    text: str
    label: int
    key: str = ""
    replay: bool = False


@dataclass
class Plan:
    """Discrete retrieval decisions for one example, reusable across probes."""

    context_ids: np.ndarray
    context_vectors: np.ndarray
    loss_ids: np.ndarray | None = None
    loss_vectors: np.ndarray | None = None
    gold_pos: int | None = None
    gate_trace: list = field(default_factory=list)


def plan_retrieval(model: CoreModel, index: HierarchicalIndex, q, gold_id: int | None = None) -> Plan:
    res = query(index, q, top_p=model.cfg.top_p, k=model.cfg.retrieval_k)
    res = gate_filter(res, q, model.gates)
    plan = Plan(res.ids, res.vectors, gate_trace=res.gate_trace)
    if gold_id is not None:
        hit = np.flatnonzero(res.ids == gold_id)
        if hit.size:
            plan.loss_ids, plan.loss_vectors, plan.gold_pos = res.ids, res.vectors, int(hit[0])
        else:
            try:
                gold_vec = index.bank.get(gold_id).vector
            except KeyError:
                return plan
            plan.loss_ids = np.append(res.ids, gold_id)
            plan.loss_vectors = np.vstack([res.vectors, gold_vec[None, :]])
            plan.gold_pos = len(res.ids)
    return plan


def _empty_plan(d: int) -> Plan:
    return Plan(np.zeros(0, np.int64), np.zeros((0, d)))


def batch_logits(model: CoreModel, index: HierarchicalIndex | None, texts: Sequence[str]) -> np.ndarray:
    """Answer logits for each text, one row per text."""
    enc = encode_batch_forward(texts, model.encoder)
    ctx = [
        plan_retrieval(model, index, q).context_vectors if index is not None else np.zeros((0, model.cfg.d))
        for q in enc.out
    ]
    logits, _ = generate_batch(enc.out, ctx, model.fusion, model.stages, model.head)
    return logits


def model_logits(model: CoreModel, index: HierarchicalIndex | None, text: str) -> np.ndarray:
    q = encode(text, model.encoder)
    ctx = plan_retrieval(model, index, q).context_vectors if index is not None else ()
    logits, _ = generate(q, ctx, model.fusion, model.stages, model.head)
    return logits


def _kd_rows(student, teacher, tau, direction):
    ls, lt = log_softmax(student / tau), log_softmax(teacher / tau)
    kl = _kl_rows(ls, lt) if direction == "student_teacher" else _kl_rows(lt, ls)
    return np.maximum(kl, 0.0)


def _batch_pass(model, index, batch, gold_ids, teacher_logits, distil, weights, cfg: TrainConfig, grads, plans=None):
    """Forward a batch, accumulate weighted gradients, return per-example terms.

    ``weights`` = (w_retrieval, w_ce, w_kd) scale each example's gradient.
    ``distil`` marks the rows that carry a distillation term.
    """
    B = len(batch)
    enc = encode_batch_forward([ex.text for ex in batch], model.encoder)
    Q = enc.out
    if plans is None:
        plans = [
            plan_retrieval(model, index, Q[i], None if gold_ids is None else gold_ids.get(ex.key))
            if index is not None
            else _empty_plan(model.cfg.d)
            for i, ex in enumerate(batch)
        ]
    logits, trace = generate_batch(Q, [pl.context_vectors for pl in plans], model.fusion, model.stages, model.head)
    labels = np.array([ex.label for ex in batch])
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise IndexError(f"labels outside [0, {logits.shape[1]})")
    logp = log_softmax(logits)
    ce = np.maximum(-logp[np.arange(B), labels], 0.0)
    kd = np.zeros(B)
    kscale = cfg.tau**2 if cfg.kd_tau_squared else 1.0
    rows = np.flatnonzero(distil)
    if rows.size:
        kd[rows] = kscale * _kd_rows(logits[rows], teacher_logits[rows], cfg.tau, cfg.kd_direction)
    ret = np.zeros(B)
    r_cache = {}
    for i, pl in enumerate(plans):
        if pl.gold_pos is not None:
            r_logits, cos, pre = gated_scores(Q[i], pl.loss_vectors, model.gates)
            ret[i] = retrieval_loss(r_logits, pl.gold_pos)
            r_cache[i] = (r_logits, cos, pre)
    if grads is None:
        return ce, kd, ret, plans
    w_ret, w_ce, w_kd = weights
    dlogits = np.exp(logp)
    dlogits[np.arange(B), labels] -= 1.0
    dlogits *= w_ce
    if rows.size and w_kd:
        dlogits[rows] += w_kd * kscale * kd_loss_grad(logits[rows], teacher_logits[rows], cfg.tau, cfg.kd_direction)
    dQ = generate_batch_backward(dlogits, trace, model.fusion, model.stages, model.head, grads)
    if w_ret:
        for i, (r_logits, cos, pre) in r_cache.items():
            pl = plans[i]
            dr = w_ret * retrieval_loss_grad(r_logits, pl.gold_pos)
            dq_r, dw, db = gated_scores_backward(dr, Q[i], pl.loss_vectors, cos, pre, model.gates)
            grads["gates.w"] += dw
            grads["gates.b"] += db
            dQ[i] += dq_r
    encode_batch_backward(enc, dQ, model.encoder, grads)
    return ce, kd, ret, plans


def total_loss(
    batch: Sequence[Example],
    model: CoreModel,
    teacher: TeacherModel | None,
    index: HierarchicalIndex | None,
    cfg: TrainConfig,
    gold_ids: dict | None = None,
    with_grad: bool = False,
    plans: list | None = None,
    teacher_logits: np.ndarray | None = None,
):
    """Evaluate the joint objective on ``batch``.

    Each term is the mean over the batch. Returns ``(LossBreakdown, grads,
    plans)``; ``grads`` is None unless ``with_grad``. Passing ``plans`` freezes
    the retrieval decisions (used for finite-difference probing), and passing
    ``teacher_logits`` (one row per example) skips the teacher forward.
    """
    if cfg.beta > 0 and teacher is None and teacher_logits is None:
        raise ConfigError("beta > 0 needs a teacher model")
    if not batch:
        raise ParameterError("empty batch")
    B = len(batch)
    distil = np.full(B, cfg.beta > 0)
    if teacher_logits is None and distil.any():
        teacher_logits = np.zeros((B, model.cfg.answer_vocab))
        rows = np.flatnonzero(distil)
        teacher_logits[rows] = batch_logits(teacher.model, index, [batch[i].text for i in rows])
    grads = model.zero_grads() if with_grad else None
    weights = (1.0 / B, cfg.lam / B, cfg.lam * cfg.beta / B)
    ce, kd, ret, plans = _batch_pass(model, index, batch, gold_ids, teacher_logits, distil, weights, cfg, grads, plans)
    parts = make_breakdown(float(ce.mean()), float(kd.mean()), float(ret.mean()), cfg.beta, cfg.lam)
    return parts, grads, plans


def ce_only_loss(batch, model, index, alpha: float, with_grad=False, plans=None):
    """alpha * mean cross-entropy, the teacher's fine-tuning objective."""
    B = len(batch)
    grads = model.zero_grads() if with_grad else None
    cfg = TrainConfig(beta=0.0)
    ce, _, _, plans = _batch_pass(
        model, index, batch, None, None, np.zeros(B, dtype=bool), (0.0, alpha / B, 0.0), cfg, grads, plans
    )
    return alpha * float(ce.mean()), grads, plans


def sgd_step(model: CoreModel, grads: dict, eta: float) -> CoreModel:
    params = model.parameters()
    missing = set(params) - set(grads)
    extra = set(grads) - set(params)
    if missing or extra:
        raise GradientSetError(f"gradient set mismatch: missing {sorted(missing)}, unknown {sorted(extra)}")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise GradientSetError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
    if eta != 0.0:
        for name, p in params.items():
            p -= eta * grads[name]
    model.revision += 1
    return model


def _batches(items: list, size: int):
    for i in range(0, len(items), size):
        yield items[i : i + size]


def examples_for(sample: Sample) -> list[Example]:
    texts = sample.queries or (sample.text,)
    return [Example(t, sample.label, sample.key) for t in texts]


def make_teacher(model: CoreModel, new_batch: Sequence[Example], index, cfg: TrainConfig, rng, created_at: int = 0) -> TeacherModel:
    """Clone ``model``, fine-tune the clone on ``new_batch`` with alpha*CE, freeze."""
    if not new_batch:
        raise ParameterError("teacher needs a non-empty batch of new samples")
    clone = model.clone()
    items = list(new_batch)
    for _ in range(cfg.teacher_epochs):
        order = rng.permutation(len(items))
        for chunk in _batches([items[i] for i in order], cfg.batch_size):
            loss, grads, _ = ce_only_loss(chunk, clone, index, cfg.alpha, with_grad=True)
            if not math.isfinite(loss):
                raise NumericAbort("teacher loss is not finite", {"loss": loss, "revision": clone.revision})
            sgd_step(clone, grads, cfg.eta)
    return TeacherModel.freeze(clone, created_at)


def insert_samples(model: CoreModel, bank: MemoryBank, samples: Sequence[Sample]):
    for s in samples:
        bank.add(encode(s.text, model.encoder), s)


def sync_index(index: HierarchicalIndex | None, bank: MemoryBank, model: CoreModel, seed) -> HierarchicalIndex:
    if index is None or index.bank is not bank:
        return build_index(bank, _clusters(model, bank), seed)
    return refresh_index(index, bank, seed)


def _clusters(model, bank):
    k = model.cfg.clusters
    return None if k is None else min(k, bank.size)


def replay_pool(bank: MemoryBank) -> list:
    """Cells eligible for replay: the newest cell for each sample key."""
    latest = bank.latest_by_key()
    return [c for c in bank.cells if latest[c.sample.key] == c.id]


@dataclass
class RoundResult:
    model: CoreModel
    index: HierarchicalIndex
    losses: list
    teacher: TeacherModel | None = None


def online_update_round(
    model: CoreModel,
    bank: MemoryBank,
    index: HierarchicalIndex | None,
    new_samples: Sequence[Sample],
    cfg: TrainConfig,
    rng: np.random.Generator,
    round_no: int = 0,
) -> RoundResult:
    if not new_samples:
        raise ParameterError("an update round needs new samples")
    insert_samples(model, bank, new_samples)
    index = sync_index(index, bank, model, int(rng.integers(2**31)))
    gold_ids = bank.latest_by_key()
    new_examples = [ex for s in new_samples for ex in examples_for(s)]
    teacher = None
    if cfg.beta > 0:
        teacher = make_teacher(model, new_examples, index, cfg, rng, created_at=round_no)
    n_replay = int(round(cfg.batch_size * cfg.replay_fraction))
    n_new = cfg.batch_size - n_replay
    pool = replay_pool(bank) if n_replay else []
    stream = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(new_examples))
        stream.extend(new_examples[i] for i in order)
    per_batch = n_new if n_new > 0 else cfg.batch_size
    n_batches = math.ceil(len(stream) / per_batch)
    losses = []
    for b in range(n_batches):
        batch = stream[b * n_new : (b + 1) * n_new] if n_new > 0 else []
        if pool:
            picks = rng.integers(len(pool), size=n_replay if n_new > 0 else cfg.batch_size)
            for j in picks:
                s = pool[int(j)].sample
                texts = s.queries or (s.text,)
                batch.append(Example(texts[int(rng.integers(len(texts)))], s.label, s.key, replay=True))
        if not batch:
            continue
        parts, grads, _ = total_loss(batch, model, teacher, index, cfg, gold_ids, with_grad=True)
        if not all(math.isfinite(v) for v in parts):
            raise NumericAbort(
                "non-finite loss during update round",
                {"round": round_no, "batch": b, "revision": model.revision, **parts.as_dict()},
            )
        sgd_step(model, grads, cfg.eta)
        losses.append(parts)
    index = sync_index(index, bank, model, int(rng.integers(2**31)))
    return RoundResult(model, index, losses, teacher)


class RAGSystem:
    """Model plus memory and index: the thing the harness evaluates."""

    def __init__(self, model: CoreModel, bank: MemoryBank | None = None, index: HierarchicalIndex | None = None):
        self.model = model
        self.bank = bank if bank is not None else MemoryBank(model.cfg.memory_capacity, model.cfg.d)
        self.index = index

    def logits(self, texts: Sequence[str]) -> np.ndarray:
        idx = self.index if self.index is not None and len(self.bank) else None
        out = [batch_logits(self.model, idx, texts[i : i + 256]) for i in range(0, len(texts), 256)]
        return np.concatenate(out) if out else np.zeros((0, self.model.cfg.answer_vocab))

    def predict(self, texts: Sequence[str]) -> np.ndarray:
        return self.logits(texts).argmax(axis=1)

    def update(self, samples: Sequence[Sample], cfg: TrainConfig, rng, round_no: int = 0) -> list:
        res = online_update_round(self.model, self.bank, self.index, samples, cfg, rng, round_no)
        self.model, self.index = res.model, res.index
        return res.losses
