"""Synthetic knowledge streams and the retention metrics computed over them.

A stream is a sequence of rounds. Round 1 introduces ``initial_facts`` facts;
every later round introduces ``facts_per_round`` fresh facts and overwrites a
share of the live ones with a new answer. Each fact is asked through several
paraphrased question templates and answered by a label in ``[0, C)``.
"""
from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ParameterError
from .memory import MemoryBank, Sample
from .trainer import CoreModel, ModelConfig, RAGSystem, TrainConfig, online_update_round

ATTRIBUTES = (
    "color", "capital", "founder", "language", "currency", "mascot",
    "river", "anthem", "motto", "sport", "flower", "element",
)
TEMPLATES = (
    "what is the {attr} of {ent}",
    "tell me the {attr} for {ent}",
    "which {attr} does {ent} have",
    "{ent} has which {attr}",
    "name the {attr} belonging to {ent}",
    "the {attr} of {ent} is what",
)
_SYLLABLES = (
    "ka", "lo", "mi", "ru", "zen", "ta", "vor", "qui", "sel", "dra", "nu", "pe",
    "bal", "tor", "fi", "gan", "xe", "mo", "rai", "len", "so", "kip", "wen", "yu",
)
STRATEGIES = ("ours", "naive_finetune", "full_retrain")


@dataclass(frozen=True)
class StreamConfig:
    rounds: int = 10
    facts_per_round: int = 50
    initial_facts: int | None = 200  # None: same as facts_per_round
    overwrite_fraction: float = 0.2
    paraphrases: int = 3
    answer_vocab: int = 64
    seed: int = 42

    def __post_init__(self):
        if self.answer_vocab < 2:
            raise ParameterError(f"answer vocabulary needs at least 2 labels, got {self.answer_vocab}")
        if self.rounds < 1 or self.facts_per_round < 0 or (self.initial_facts is not None and self.initial_facts < 1):
            raise ParameterError("rounds and initial facts must be positive")
        if not 0.0 <= self.overwrite_fraction < 1.0:
            raise ParameterError("overwrite_fraction must lie in [0, 1)")
        if not 2 <= self.paraphrases <= len(TEMPLATES):
            raise ParameterError(f"paraphrases must lie in [2, {len(TEMPLATES)}]")

    @property
    def first_round_facts(self) -> int:
        return self.facts_per_round if self.initial_facts is None else self.initial_facts

    @property
    def overwrites_per_round(self) -> int:
        return int(round(self.overwrite_fraction * self.facts_per_round))


@dataclass(frozen=True)
class KnowledgeRecord:
    fact_id: int
    question_templates: tuple
    answer: int
    introduced_round: int
    supersedes: int | None = None

    @property
    def key(self) -> str:
        return self.question_templates[0]

    def to_sample(self) -> Sample:
        return Sample(f"{self.question_templates[0]} ans{self.answer}", self.answer, self.key, tuple(self.question_templates))

    def to_json(self) -> dict:
        return {
            "fact_id": self.fact_id,
            "round": self.introduced_round,
            "questions": list(self.question_templates),
            "answer": self.answer,
            "supersedes": self.supersedes,
        }


class Stream:
    """Per-round record lists plus lookups of what is live at a given round."""

    def __init__(self, rounds: Sequence[Sequence[KnowledgeRecord]], config: StreamConfig | None = None):
        self.rounds = [list(r) for r in rounds]
        self.config = config
        self._by_id = {r.fact_id: r for rr in self.rounds for r in rr}
        self._superseded_at = {}
        for rr in self.rounds:
            for r in rr:
                if r.supersedes is not None:
                    self._superseded_at[r.supersedes] = r.introduced_round

    def __len__(self):
        return len(self.rounds)

    def __iter__(self):
        return iter(self.rounds)

    def __getitem__(self, i):
        return self.rounds[i]

    @property
    def records(self) -> list[KnowledgeRecord]:
        return [r for rr in self.rounds for r in rr]

    def record(self, fact_id: int) -> KnowledgeRecord:
        return self._by_id[fact_id]

    def live(self, round_no: int) -> list[KnowledgeRecord]:
        """Records introduced by ``round_no`` and not yet superseded by then."""
        return [
            r for r in self.records
            if r.introduced_round <= round_no and self._superseded_at.get(r.fact_id, math.inf) > round_no
        ]

    def superseded(self, fact_id: int, round_no: int) -> bool:
        return self._superseded_at.get(fact_id, math.inf) <= round_no

    def to_jsonl(self) -> str:
        lines = []
        if self.config is not None:
            lines.append(json.dumps({"format": "ragiu-corpus", "version": 1, "stream": asdict(self.config)}, sort_keys=True))
        lines.extend(json.dumps(r.to_json(), sort_keys=True) for r in self.records)
        return "\n".join(lines) + "\n"


def _entity_names(rng: np.random.Generator, n: int) -> list[str]:
    names, seen = [], set()
    while len(names) < n:
        k = int(rng.integers(2, 4))
        name = "".join(_SYLLABLES[int(i)] for i in rng.integers(len(_SYLLABLES), size=k))
        if name in seen:
            name = f"{name}{len(names)}"
        seen.add(name)
        names.append(name)
    return names


def synth_stream(config: StreamConfig) -> Stream:
    rng = np.random.default_rng(config.seed)
    total_fresh = config.first_round_facts + config.facts_per_round * (config.rounds - 1)
    entities = _entity_names(rng, total_fresh)
    next_fact = 0
    next_entity = 0
    rounds: list[list[KnowledgeRecord]] = []
    live: dict[str, KnowledgeRecord] = {}  # key -> current record

    def fresh(round_no):
        nonlocal next_fact, next_entity
        ent = entities[next_entity]
        next_entity += 1
        attr = ATTRIBUTES[int(rng.integers(len(ATTRIBUTES)))]
        picks = rng.choice(len(TEMPLATES), size=config.paraphrases, replace=False)
        qs = tuple(TEMPLATES[int(i)].format(attr=attr, ent=ent) for i in picks)
        rec = KnowledgeRecord(next_fact, qs, int(rng.integers(config.answer_vocab)), round_no)
        next_fact += 1
        return rec

    for r in range(1, config.rounds + 1):
        batch = []
        n_fresh = config.first_round_facts if r == 1 else config.facts_per_round
        if r > 1 and config.overwrite_fraction > 0 and live:
            keys = sorted(live, key=lambda k: live[k].fact_id)
            n_over = min(config.overwrites_per_round, len(keys))
            for i in sorted(rng.choice(len(keys), size=n_over, replace=False)):
                old = live[keys[int(i)]]
                shift = int(rng.integers(1, config.answer_vocab))
                batch.append(
                    KnowledgeRecord(-1, old.question_templates, (old.answer + shift) % config.answer_vocab, r, old.fact_id)
                )
        fresh_recs = [fresh(r) for _ in range(n_fresh)]
        # overwrites take ids after this round's fresh facts
        numbered = list(fresh_recs)
        for rec in batch:
            numbered.append(
                KnowledgeRecord(next_fact, rec.question_templates, rec.answer, r, rec.supersedes)
            )
            next_fact += 1
        for rec in numbered:
            live[rec.key] = rec
        rounds.append(numbered)
    return Stream(rounds, config)


# -- metrics -----------------------------------------------------------------

class LookupModel:
    """Stub predictor answering from a fixed text -> label table."""

    def __init__(self, table: dict, answer_vocab: int, default: int = 0):
        self.table = dict(table)
        self.C = answer_vocab
        self.default = default

    @classmethod
    def oracle(cls, stream: Stream, round_no: int | None = None):
        round_no = len(stream) if round_no is None else round_no
        table = {q: r.answer for r in stream.live(round_no) for q in r.question_templates}
        C = stream.config.answer_vocab if stream.config else max(table.values()) + 1
        return cls(table, max(C, 2))

    def logits(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.C))
        for i, t in enumerate(texts):
            out[i, self.table.get(t, self.default)] = 1.0
        return out


class ConstantModel:
    def __init__(self, logits):
        self._logits = np.asarray(logits, dtype=np.float64)

    def logits(self, texts):
        return np.tile(self._logits, (len(texts), 1))


class _Cached:
    """Memoises predicted labels per text for one evaluation pass."""

    def __init__(self, model):
        self.model = model
        self.memo: dict[str, int] = {}

    def predict(self, texts: Sequence[str]) -> list[int]:
        todo = [t for t in dict.fromkeys(texts) if t not in self.memo]
        if todo:
            for t, lab in zip(todo, np.asarray(self.model.logits(todo)).argmax(axis=1)):
                self.memo[t] = int(lab)
        return [self.memo[t] for t in texts]


def _predictor(model):
    return model if isinstance(model, _Cached) else _Cached(model)


def eval_accuracy(model, records: Sequence[KnowledgeRecord]) -> float:
    """Share of records whose canonical question is answered with the record's answer."""
    if not records:
        raise ParameterError("accuracy needs at least one record")
    pred = _predictor(model).predict([r.question_templates[0] for r in records])
    return sum(int(p == r.answer) for p, r in zip(pred, records)) / len(records)


def eval_non_forgetting(model, stream: Stream, current_round: int, window: int = 3) -> float | None:
    """Accuracy on facts at least ``window`` rounds old that were never overwritten.

    Returns None when no fact is eligible.
    """
    old = [r for r in stream.live(current_round) if r.introduced_round <= current_round - window]
    if current_round <= window or not old:
        return None
    return eval_accuracy(model, old)


def eval_confusion(model, stream: Stream, current_round: int) -> float | None:
    """Share of overwritten facts for which the model gives the new answer.

    Covers every live record that replaced an older answer by ``current_round``.
    Returns None when nothing has been overwritten yet.
    """
    updated = [r for r in stream.live(current_round) if r.supersedes is not None]
    if not updated:
        return None
    return eval_accuracy(model, updated)


def eval_consistency(model, stream: Stream, current_round: int | None = None) -> float:
    """Share of live facts whose paraphrases all receive the same label."""
    current_round = len(stream) if current_round is None else current_round
    facts = stream.live(current_round)
    if not facts:
        raise ParameterError("no live facts")
    if min(len(r.question_templates) for r in facts) < 2:
        raise ParameterError("consistency needs at least two paraphrases per fact")
    pred = _predictor(model)
    agree = 0
    for r in facts:
        labels = pred.predict(list(r.question_templates))
        agree += int(len(set(labels)) == 1)
    return agree / len(facts)


def evaluate_round(model, stream: Stream, current_round: int, window: int = 3) -> dict:
    pred = _Cached(model)
    return {
        "accuracy": eval_accuracy(pred, stream.live(current_round)),
        "non_forgetting_rate": eval_non_forgetting(pred, stream, current_round, window),
        "confusion_accuracy": eval_confusion(pred, stream, current_round),
        "consistency": eval_consistency(pred, stream, current_round),
    }


# -- experiments -------------------------------------------------------------

METRICS = ("accuracy", "non_forgetting_rate", "confusion_accuracy", "consistency")


@dataclass
class MetricsReport:
    strategy: str
    seed: int
    accuracy: list = field(default_factory=list)
    non_forgetting_rate: list = field(default_factory=list)
    confusion_accuracy: list = field(default_factory=list)
    consistency: list = field(default_factory=list)
    fingerprint: str = ""
    round_seconds: list = field(default_factory=list)
    losses: list = field(default_factory=list)  # mean l_total per round

    def series(self, metric: str) -> list:
        return getattr(self, metric)

    @property
    def final(self) -> dict:
        return {m: self.series(m)[-1] if self.series(m) else None for m in METRICS}

    def to_dict(self, include_timing: bool = False) -> dict:
        out = {
            "strategy": self.strategy,
            "seed": self.seed,
            "fingerprint": self.fingerprint,
            "rounds": len(self.accuracy),
            "series": {m: self.series(m) for m in METRICS},
            "final": self.final,
            "mean_loss": self.losses,
        }
        if include_timing:
            out["round_seconds"] = self.round_seconds
        return out

    def rows(self) -> Iterable[tuple]:
        for m in METRICS:
            for r, v in enumerate(self.series(m), start=1):
                yield (self.strategy, self.seed, r, m, v)


def config_fingerprint(*configs) -> str:
    blob = json.dumps([asdict(c) for c in configs], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def strategy_config(strategy: str, cfg: TrainConfig) -> TrainConfig:
    if strategy == "ours":
        return cfg
    if strategy in ("naive_finetune", "full_retrain"):
        return cfg.replace(beta=0.0, replay_fraction=0.0)
    raise ParameterError(f"unknown strategy {strategy!r}; expected one of {', '.join(STRATEGIES)}")


def train_rounds(
    strategy: str,
    stream: Stream,
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    seed: int,
):
    """Feed each stream round to one update strategy.

    Yields ``(round_no, system, losses, seconds)`` after every round, where
    ``seconds`` is the wall-clock time of the update alone. ``seed`` drives
    model initialisation and batch sampling, so strategies sharing a seed start
    from identical weights.
    """
    cfg = strategy_config(strategy, train_cfg)
    init_seq, train_seq = np.random.SeedSequence(seed).spawn(2)
    system = RAGSystem(CoreModel.init(model_cfg, np.random.default_rng(init_seq)))
    round_seqs = train_seq.spawn(len(stream))
    for r, new in enumerate(stream, start=1):
        rng = np.random.default_rng(round_seqs[r - 1])
        t0 = time.perf_counter()
        if strategy == "full_retrain":
            system = RAGSystem(CoreModel.init(model_cfg, np.random.default_rng(init_seq)))
            samples = [rec.to_sample() for rec in stream.live(r)]
        else:
            samples = [rec.to_sample() for rec in new]
        losses = system.update(samples, cfg, rng, round_no=r) if samples else []
        yield r, system, losses, time.perf_counter() - t0


def run_experiment(
    strategy: str,
    stream_cfg: StreamConfig,
    train_cfg: TrainConfig | None = None,
    model_cfg: ModelConfig | None = None,
    window: int = 3,
    stream: Stream | None = None,
    seed: int | None = None,
) -> MetricsReport:
    """Stream every round through one update strategy and record the metrics.

    ``seed`` defaults to the stream seed.
    """
    train_cfg = TrainConfig() if train_cfg is None else train_cfg
    model_cfg = ModelConfig(answer_vocab=stream_cfg.answer_vocab) if model_cfg is None else model_cfg
    if model_cfg.answer_vocab != stream_cfg.answer_vocab:
        raise ConfigError("model and stream disagree on the answer vocabulary size")
    stream = synth_stream(stream_cfg) if stream is None else stream
    seed = stream_cfg.seed if seed is None else seed
    cfg = strategy_config(strategy, train_cfg)
    report = MetricsReport(strategy, seed, fingerprint=config_fingerprint(stream_cfg, cfg, model_cfg))
    system = None
    for r, system, losses, seconds in train_rounds(strategy, stream, train_cfg, model_cfg, seed):
        report.round_seconds.append(seconds)
        report.losses.append(float(np.mean([l.l_total for l in losses])) if losses else None)
        for m, v in evaluate_round(system, stream, r, window).items():
            report.series(m).append(v)
    report.system = system
    return report
