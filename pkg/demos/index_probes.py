"""How many clusters to probe: recall against exhaustive search.

Builds a clustered index over a two-blob corpus and measures recall@5 of the
approximate search as the number of probed clusters grows.

    python3 demos/index_probes.py
"""
import numpy as np

from ragiu.memory import MemoryBank, Sample
from ragiu.retrieval import build_index, default_probes, query

rng = np.random.default_rng(0)
n, d = 400, 16
axis = rng.normal(size=d)
axis /= np.linalg.norm(axis)
X = np.stack([5 * axis, -5 * axis])[rng.integers(2, size=n)] + rng.normal(size=(n, d))

bank = MemoryBank(n, d)
for i, x in enumerate(X):
    bank.add(x, Sample(f"doc {i}", 0, f"k{i}"))
index = build_index(bank, seed=0)
print(f"{n} vectors in {index.K} clusters, default probes = {default_probes(index.K)}")

queries = [X[rng.integers(n)] + rng.normal(0, 0.1, d) for _ in range(200)]
exact = [set(query(index, q, top_p=index.K, k=5).ids) for q in queries]
for p in range(1, index.K + 1):
    recall = np.mean([len(set(query(index, q, top_p=p, k=5).ids) & e) / 5 for q, e in zip(queries, exact)])
    print(f"probe {p:2d} clusters: recall@5 {recall:.3f}")
