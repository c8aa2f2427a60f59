import numpy as np
import pytest

from ragiu.checkpoint import dumps, load, loads, save
from ragiu.errors import FormatError
from ragiu.harness import StreamConfig, synth_stream, train_rounds
from ragiu.trainer import CoreModel, ModelConfig, RAGSystem, TrainConfig

MODEL = ModelConfig(d=16, vocab_size=256, d_k=8, answer_vocab=8, memory_capacity=48)


@pytest.fixture(scope="module")
def trained():
    stream = synth_stream(StreamConfig(rounds=3, facts_per_round=8, initial_facts=20, answer_vocab=8, seed=4))
    system = None
    for _, system, _, _ in train_rounds("ours", stream, TrainConfig(epochs=1), MODEL, seed=4):
        pass
    queries = [q for r in stream.records for q in r.question_templates][:100]
    return system, queries


def test_resave_is_byte_identical(trained, tmp_path):
    system, _ = trained
    save(system, tmp_path / "a.ckpt")
    again = load(tmp_path / "a.ckpt")
    save(again, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_outputs_bitwise_equal(trained):
    system, queries = trained
    assert len(queries) == 100
    back = loads(dumps(system))
    assert np.array_equal(system.logits(queries), back.logits(queries))
    assert back.bank.size == system.bank.size
    assert back.model.revision == system.model.revision


def test_untrained_without_index():
    fresh = RAGSystem(CoreModel.init(MODEL, np.random.default_rng(0)))
    back = loads(dumps(fresh))
    assert back.index is None and back.bank.size == 0
    assert np.array_equal(back.logits(["a b c"]), fresh.logits(["a b c"]))


def test_truncation(trained):
    data = dumps(trained[0])
    for cut in (3, 20, len(data) // 2, len(data) - 1):
        with pytest.raises(FormatError):
            loads(data[:cut])


def test_bad_magic_version_and_trailing(trained):
    data = dumps(trained[0])
    with pytest.raises(FormatError, match="magic"):
        loads(b"XXXXXX" + data[6:])
    with pytest.raises(FormatError, match="version"):
        loads(data[:6] + bytes([99]) + data[7:])
    with pytest.raises(FormatError, match="trailing"):
        loads(data + b"\0")
