import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ragiu.errors import EmptyInputError, ParameterError, ShapeError
from ragiu.memory import (
    EncoderParams,
    MemoryBank,
    MemoryCell,
    Sample,
    encode,
    encode_backward,
    encode_batch_backward,
    encode_batch_forward,
    encode_forward,
    fnv1a_64,
    token_ids,
    tokenize,
)
from ragiu.numerics import grad_check


@pytest.fixture
def params():
    return EncoderParams.init(np.random.default_rng(0), d=8, vocab_size=64)


def replay_oracle(inserts, capacity):
    """Unbounded list truncated to the last ``capacity`` entries."""
    return list(inserts)[-capacity:]


def fill(bank, labels):
    for lab in labels:
        bank.add(np.full(bank.dim, float(lab)), Sample(f"s{lab}", lab))
    return bank


def test_fnv1a_reference_values():
    # published FNV-1a 64 test vectors
    assert fnv1a_64(b"") == 0xCBF29CE484222325
    assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64(b"foobar") == 0x85944171F73967E8


def test_tokenize_lowercases_and_splits():
    assert tokenize("  What  IS\tthe X\n") == ["what", "is", "the", "x"]
    assert token_ids("Alpha alpha", 1000)[0] == token_ids("alpha", 1000)[0]


def test_encode_deterministic(params):
    a = encode("what is X", params)
    b = encode("what is X", params)
    assert np.array_equal(a, b)
    assert np.all(np.abs(a) < 1)


def test_encode_zero_params():
    p = EncoderParams.init(np.random.default_rng(1), d=4, vocab_size=16)
    p.w_enc[...] = 0.0
    assert np.array_equal(encode("anything at all", p), np.zeros(4))


def test_encode_order_invariant(params):
    assert np.array_equal(encode("alpha beta", params), encode("beta alpha", params))


def test_encode_empty_input(params):
    with pytest.raises(EmptyInputError):
        encode("   \n\t", params)
    with pytest.raises(EmptyInputError):
        encode_batch_forward(["fine", ""], params)


def test_encoder_shape_validation():
    with pytest.raises(ShapeError):
        EncoderParams(np.zeros((4, 3)), np.zeros((2, 2)), np.zeros(2))


def test_batch_encoding_matches_single(params):
    texts = ["alpha beta", "what is the capital of lomi", "x", "alpha beta"]
    batch = encode_batch_forward(texts, params).out
    for row, t in zip(batch, texts):
        assert np.allclose(row, encode(t, params), atol=1e-14, rtol=0)


@pytest.mark.parametrize("seed", range(20))
def test_encoder_gradient(seed):
    rng = np.random.default_rng(seed)
    p = EncoderParams.init(rng, d=6, vocab_size=12)
    p.embed[...] = rng.uniform(-2, 2, p.embed.shape)
    texts = ["alpha beta gamma", "delta alpha", "eps"]
    proj = rng.uniform(-2, 2, (len(texts), 6))
    named = {"encoder.embed": p.embed, "encoder.w_enc": p.w_enc, "encoder.b_enc": p.b_enc}

    def loss(_):
        return float((encode_batch_forward(texts, p).out * proj).sum())

    grads = {k: np.zeros_like(v) for k, v in named.items()}
    encode_batch_backward(encode_batch_forward(texts, p), proj, p, grads)
    assert max(grad_check(loss, named, grads).values()) < 1e-4
    single = {k: np.zeros_like(v) for k, v in named.items()}
    for t, row in zip(texts, proj):
        encode_backward(encode_forward(t, p), row, p, single)
    for k in named:
        assert np.allclose(single[k], grads[k], atol=1e-12)


def test_eviction_example():
    bank = fill(MemoryBank(3, 2), [1, 2, 3, 4])
    assert [c.sample.label for c in bank.cells] == [2, 3, 4]


def test_capacity_one_keeps_latest():
    bank = fill(MemoryBank(1, 2), [5, 1, 7, 3])
    assert [c.sample.label for c in bank.cells] == [3]


def test_random_inserts_match_replay_oracle():
    rng = np.random.default_rng(3)
    labels = [int(x) for x in rng.integers(0, 100, 12)]
    bank = fill(MemoryBank(5, 2), labels)
    assert [c.sample.label for c in bank.cells] == replay_oracle(labels, 5)


@given(st.integers(1, 8), st.lists(st.integers(0, 9), max_size=30))
def test_fifo_property(capacity, labels):
    bank = MemoryBank(capacity, 1)
    evicted = []
    for lab in labels:
        oldest = bank.cells[0] if bank.size == capacity else None
        out = bank.insert(bank.new_cell(np.array([float(lab)]), Sample(str(lab), lab)))
        assert out is oldest
        if out is not None:
            evicted.append(out)
        assert bank.size <= capacity
    assert bank.size == min(len(labels), capacity)
    assert [c.sample.label for c in bank.cells] == replay_oracle(labels, capacity)
    ats = [c.inserted_at for c in bank.cells]
    assert ats == sorted(ats) and len(set(ats)) == len(ats)
    assert len(evicted) == max(0, len(labels) - capacity)


def test_insert_rejects_wrong_dim():
    bank = MemoryBank(2, 3)
    with pytest.raises(ShapeError):
        bank.add(np.zeros(4), Sample("a", 0))


def test_insert_rejects_stale_id():
    bank = MemoryBank(2, 1)
    bank.add(np.zeros(1), Sample("a", 0))
    with pytest.raises(ParameterError):
        bank.insert(MemoryCell(0, np.zeros(1), 5, Sample("b", 0)))


def test_bad_capacity():
    with pytest.raises(ParameterError):
        MemoryBank(0, 2)


def test_snapshot():
    bank = MemoryBank(4, 2)
    assert bank.snapshot() == []
    fill(bank, [1, 2])
    snap = bank.snapshot()
    assert [e.sample.label for e in snap] == [1, 2]
    before = [e.vector.copy() for e in snap]
    fill(bank, [3, 4, 5])
    snap[0].vector[0] = 99.0
    assert [e.sample.label for e in snap] == [1, 2]
    assert bank.cells[0].vector[0] != 99.0
    assert np.array_equal(before[1], snap[1].vector)


def test_get_and_latest_by_key():
    bank = MemoryBank(4, 1)
    for i, key in enumerate(["a", "b", "a"]):
        bank.add(np.zeros(1), Sample(str(i), i, key))
    assert bank.get(1).sample.key == "b"
    assert bank.latest_by_key() == {"a": 2, "b": 1}
    with pytest.raises(KeyError):
        bank.get(17)
