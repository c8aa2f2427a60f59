"""Finite-difference check of the whole model's analytic gradients."""
from __future__ import annotations

from collections import defaultdict

import numpy as np

from .memory import MemoryBank, Sample
from .numerics import grad_check
from .trainer import CoreModel, Example, ModelConfig, TeacherModel, TrainConfig, batch_logits, insert_samples, sync_index, total_loss

WORDS = "alpha beta gamma delta epsilon zeta eta theta iota kappa lambda mu".split()


def small_instance(seed: int, dims: int = 8, batch: int = 4):
    """A tiny model, populated bank, index, perturbed teacher and batch."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(
        d=dims, vocab_size=4 * dims, stages=2, d_k=max(1, dims // 2), answer_vocab=3,
        memory_capacity=16, retrieval_k=3,
    )
    model = CoreModel.init(cfg, rng)
    bank = MemoryBank(cfg.memory_capacity, dims)
    samples = [
        Sample(" ".join(rng.choice(WORDS, 4)), int(rng.integers(3)), f"k{i}", (" ".join(rng.choice(WORDS, 3)),))
        for i in range(10)
    ]
    insert_samples(model, bank, samples)
    index = sync_index(None, bank, model, seed)
    shifted = model.clone()
    for p in shifted.parameters().values():
        p += rng.normal(0.0, 0.3, p.shape)
    teacher = TeacherModel.freeze(shifted)
    examples = [Example(s.queries[0], s.label, s.key) for s in samples[:batch]]
    return model, index, teacher, examples, bank.latest_by_key()


def check_instance(seed: int, dims: int = 8, h: float = 1e-5, tcfg: TrainConfig | None = None) -> dict:
    """Worst relative gradient error per parameter on one random instance.

    Retrieval choices and teacher outputs are held fixed while probing, since
    they are discrete or constant with respect to the student's parameters.
    """
    model, index, teacher, batch, gold = small_instance(seed, dims)
    tcfg = TrainConfig(beta=1.0, lam=0.7, tau=2.0) if tcfg is None else tcfg
    t_logits = batch_logits(teacher.model, index, [ex.text for ex in batch])
    _, grads, plans = total_loss(batch, model, teacher, index, tcfg, gold, with_grad=True, teacher_logits=t_logits)

    def loss(_params):
        return total_loss(batch, model, None, index, tcfg, gold, plans=plans, teacher_logits=t_logits)[0].l_total

    return grad_check(loss, model.parameters(), grads, h)


def group_of(name: str) -> str:
    return name.split(".", 1)[0]


def gradient_suite(seeds=range(20), dims: int = 8, h: float = 1e-5) -> dict:
    """Worst relative error per parameter group over all seeds."""
    worst: dict = defaultdict(float)
    for seed in seeds:
        for name, err in check_instance(seed, dims, h).items():
            g = group_of(name)
            worst[g] = max(worst[g], err)
    return dict(worst)
