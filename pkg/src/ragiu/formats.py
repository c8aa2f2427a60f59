"""Text file formats: line-delimited JSON corpora and flat ``key = value`` configs."""
from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError, CorpusError
from .harness import KnowledgeRecord, Stream, StreamConfig
from .trainer import ModelConfig, TrainConfig

CORPUS_FORMAT = "ragiu-corpus"
CORPUS_VERSION = 1


# -- corpora -----------------------------------------------------------------

def write_corpus(stream: Stream, path) -> None:
    Path(path).write_text(stream.to_jsonl(), encoding="utf-8")


def _record(obj, line: int, seen: dict, answer_vocab: int | None) -> KnowledgeRecord:
    if not isinstance(obj, dict):
        raise CorpusError("record is not a JSON object", line)
    missing = {"fact_id", "round", "questions", "answer"} - obj.keys()
    if missing:
        raise CorpusError(f"missing field(s) {', '.join(sorted(missing))}", line)
    extra = obj.keys() - {"fact_id", "round", "questions", "answer", "supersedes"}
    if extra:
        raise CorpusError(f"unknown field(s) {', '.join(sorted(extra))}", line)

    def integer(name, lo=0):
        v = obj[name]
        if isinstance(v, bool) or not isinstance(v, int) or v < lo:
            raise CorpusError(f"{name} must be an integer >= {lo}, got {v!r}", line)
        return v

    fact_id, rnd, answer = integer("fact_id"), integer("round", 1), integer("answer")
    if answer_vocab is not None and answer >= answer_vocab:
        raise CorpusError(f"answer {answer} outside [0, {answer_vocab})", line)
    qs = obj["questions"]
    if not isinstance(qs, list) or not qs or not all(isinstance(q, str) and q.split() for q in qs):
        raise CorpusError("questions must be a non-empty list of non-blank strings", line)
    if fact_id in seen:
        raise CorpusError(f"duplicate fact_id {fact_id}", line)
    sup = obj.get("supersedes")
    if sup is not None:
        if isinstance(sup, bool) or not isinstance(sup, int):
            raise CorpusError(f"supersedes must be a fact id or null, got {sup!r}", line)
        if sup not in seen:
            raise CorpusError(f"supersedes unknown or later fact {sup}", line)
        if seen[sup].introduced_round >= rnd:
            raise CorpusError(f"fact {fact_id} supersedes fact {sup} from the same or a later round", line)
    return KnowledgeRecord(fact_id, tuple(qs), answer, rnd, sup)


def parse_corpus(text: str) -> Stream:
    """Parse a corpus; errors name the 1-based line that broke the schema."""
    config = None
    seen: dict[int, KnowledgeRecord] = {}
    records = []
    for n, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"invalid JSON: {exc.msg}", n) from None
        if isinstance(obj, dict) and "format" in obj:
            if records or config is not None:
                raise CorpusError("header must be the first line", n)
            if obj.get("format") != CORPUS_FORMAT or obj.get("version") != CORPUS_VERSION:
                raise CorpusError(f"unsupported corpus format {obj.get('format')!r} v{obj.get('version')!r}", n)
            try:
                config = StreamConfig(**obj.get("stream", {}))
            except (TypeError, ValueError) as exc:
                raise CorpusError(f"bad stream header: {exc}", n) from None
            continue
        rec = _record(obj, n, seen, None if config is None else config.answer_vocab)
        seen[rec.fact_id] = rec
        records.append(rec)
    if not records:
        raise CorpusError("corpus holds no records")
    last = max(r.introduced_round for r in records)
    rounds = [[] for _ in range(last)]
    for rec in records:
        rounds[rec.introduced_round - 1].append(rec)
    return Stream(rounds, config)


def read_corpus(path) -> Stream:
    return parse_corpus(Path(path).read_text(encoding="utf-8"))


# -- run configuration ---------------------------------------------------------

def _field_types(cls) -> dict:
    return {f.name: (f.type, f.default) for f in fields(cls)}


# every section's fields share one flat namespace; answer_vocab and seed are shared
_SECTIONS = {
    "model": _field_types(ModelConfig),
    "train": _field_types(TrainConfig),
    "stream": _field_types(StreamConfig),
    "run": {"seed": ("int", 42), "window": ("int", 3), "out": ("str | None", None), "log": ("str | None", None)},
}
DEFAULTS: dict = {}
_TYPES: dict = {}
for _sec in _SECTIONS.values():
    for _name, (_typ, _default) in _sec.items():
        DEFAULTS.setdefault(_name, _default)
        _TYPES.setdefault(_name, _typ)


def _coerce(key: str, raw):
    typ = _TYPES[key]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if "None" in typ and text.lower() in ("none", ""):
        return None
    base = typ.replace(" | None", "")
    try:
        if base == "int":
            return int(text)
        if base == "float":
            return float(text)
        if base == "bool":
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {base}") from None
    return text


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of a run in one flat mapping with documented defaults."""

    values: dict

    @classmethod
    def from_mapping(cls, mapping: dict | None = None) -> "RunConfig":
        vals = dict(DEFAULTS)
        for k, v in (mapping or {}).items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            vals[k] = _coerce(k, v)
        cfg = cls(vals)
        # validate every section eagerly
        cfg.model_config(), cfg.train_config(), cfg.stream_config()
        return cfg

    @classmethod
    def from_text(cls, text: str, overrides: dict | None = None) -> "RunConfig":
        return cls.from_mapping({**parse_config_text(text), **(overrides or {})})

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), overrides)

    def __getitem__(self, key):
        return self.values[key]

    def _section(self, name, cls):
        return cls(**{k: self.values[k] for k in _SECTIONS[name]})

    def model_config(self) -> ModelConfig:
        return self._section("model", ModelConfig)

    def train_config(self) -> TrainConfig:
        return self._section("train", TrainConfig)

    def stream_config(self) -> StreamConfig:
        return self._section("stream", StreamConfig)

    def to_text(self) -> str:
        return "".join(f"{k} = {'none' if v is None else v}\n" for k, v in self.values.items())


def parse_config_text(text: str) -> dict:
    """Read ``key = value`` lines; ``#`` starts a comment. Keys must be known."""
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"config line {n}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"config line {n}: duplicate key {key!r}")
        out[key] = value
    return out
