import json

import pytest

from ragiu.errors import ConfigError, CorpusError
from ragiu.formats import DEFAULTS, RunConfig, parse_corpus, read_corpus, write_corpus
from ragiu.harness import StreamConfig, synth_stream
from ragiu.trainer import ModelConfig, TrainConfig


def small():
    return synth_stream(StreamConfig(rounds=4, facts_per_round=5, initial_facts=8, answer_vocab=6, seed=9))


def test_corpus_roundtrip(tmp_path):
    s = small()
    p = tmp_path / "c.jsonl"
    write_corpus(s, p)
    back = read_corpus(p)
    assert back.to_jsonl() == s.to_jsonl()
    assert back.config == s.config
    assert [r.supersedes for r in back.records] == [r.supersedes for r in s.records]


def test_corpus_without_header():
    lines = small().to_jsonl().splitlines()[1:]
    back = parse_corpus("\n".join(lines))
    assert back.config is None and len(back.records) == len(lines)


def corrupt(line_no, replacement):
    lines = small().to_jsonl().splitlines()
    lines[line_no - 1] = replacement
    return "\n".join(lines)


def test_corrupted_line_is_named():
    with pytest.raises(CorpusError, match="line 7") as info:
        parse_corpus(corrupt(7, '{"fact_id": 3, "round": '))
    assert info.value.line == 7


@pytest.mark.parametrize(
    "record, message",
    [
        ({"fact_id": 900, "round": 1, "questions": ["q a"]}, "missing"),
        ({"fact_id": 900, "round": 1, "questions": ["q a"], "answer": 1, "colour": 2}, "unknown field"),
        ({"fact_id": 900, "round": 0, "questions": ["q a"], "answer": 1}, "round"),
        ({"fact_id": 900, "round": 1, "questions": [], "answer": 1}, "questions"),
        ({"fact_id": 900, "round": 1, "questions": ["q"], "answer": 99}, "outside"),
        ({"fact_id": 900, "round": 1, "questions": ["q"], "answer": True}, "answer"),
        ({"fact_id": 0, "round": 1, "questions": ["q"], "answer": 1}, "duplicate"),
        ({"fact_id": 900, "round": 1, "questions": ["q"], "answer": 1, "supersedes": 12345}, "unknown"),
        ({"fact_id": 900, "round": 1, "questions": ["q"], "answer": 1, "supersedes": 0}, "same or a later"),
    ],
)
def test_schema_violations(record, message):
    text = small().to_jsonl() + json.dumps(record) + "\n"
    n = len(text.splitlines())
    with pytest.raises(CorpusError, match=message) as info:
        parse_corpus(text)
    assert info.value.line == n


def test_bad_header_and_empty():
    with pytest.raises(CorpusError, match="unsupported"):
        parse_corpus('{"format": "other", "version": 1}\n')
    with pytest.raises(CorpusError, match="no records"):
        parse_corpus("\n\n")


# -- configuration -----------------------------------------------------------

def test_defaults_match_dataclasses():
    cfg = RunConfig.from_mapping()
    assert cfg.model_config() == ModelConfig()
    assert cfg.train_config() == TrainConfig()
    assert cfg.stream_config() == StreamConfig()
    assert cfg["seed"] == 42 and cfg["window"] == 3


def test_text_and_overrides():
    text = "# a comment\neta = 0.1\nbeta = 2  # trailing\nclusters = none\nrounds = 4\n"
    cfg = RunConfig.from_text(text, {"beta": "0.5"})
    assert cfg.train_config().eta == 0.1
    assert cfg.train_config().beta == 0.5
    assert cfg.model_config().clusters is None
    assert cfg.stream_config().rounds == 4


def test_to_text_roundtrip():
    cfg = RunConfig.from_mapping({"eta": 0.2, "top_p": 4, "answer_vocab": 16})
    assert RunConfig.from_text(cfg.to_text()) == cfg


def test_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("epochs = 1\n")
    assert RunConfig.from_file(p).train_config().epochs == 1


@pytest.mark.parametrize(
    "text, message",
    [
        ("etaa = 0.1\n", "unknown config key"),
        ("eta = 0.1\neta = 0.2\n", "duplicate"),
        ("eta 0.1\n", "expected"),
        ("eta = fast\n", "cannot read"),
    ],
)
def test_config_strictness(text, message):
    with pytest.raises(ConfigError, match=message):
        RunConfig.from_text(text)


def test_unknown_override_rejected():
    with pytest.raises(ConfigError):
        RunConfig.from_mapping({"learning_rate": 0.1})


def test_invalid_value_rejected():
    with pytest.raises(ValueError):
        RunConfig.from_mapping({"eta": -1})


def test_every_key_has_a_default():
    assert {"d", "eta", "rounds", "seed", "window", "out", "log"} <= set(DEFAULTS)
