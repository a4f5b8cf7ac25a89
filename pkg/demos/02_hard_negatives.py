"""
Semantic filtering of hard negatives
====================================

Pools of K negatives are refreshed with score-weighted sampling, then the
item least similar to the user in projected semantic space is used in BPR.
"""
import numpy as np

from llmhni.data import TRAIN, split_dataset
from llmhni.negatives import HardNegativePools
from llmhni.semantic import build_alignment_labels, project, raw_similarity_matrix, train_projector, ProjectorConfig
from llmhni.synthetic import generate_corpus

corpus = generate_corpus(seed=0)
data = split_dataset(corpus.dataset, (0.6, 0.2, 0.2), seed=0)

# Reliable positives: train positives that also rank in the user's raw top-50.
labels = build_alignment_labels(corpus.raw, data, n=50)
print(f"{sum(map(len, labels.values()))} reliable positives across {len(labels)} users")

proj = project(train_projector(corpus.raw, labels, data, ProjectorConfig(d_rec=64, epochs=50)), corpus.raw)
pairs = np.array([(u, i) for u, items in labels.items() for i in items])
on_label = np.mean(np.sum(proj.user[pairs[:, 0]] * proj.item[pairs[:, 1]], axis=1))
overall = np.mean(proj.user @ proj.item.T)
print(f"projected cosine: labeled pairs {on_label:.3f}, all pairs {overall:.3f}")

# Use raw cosine as a stand-in recommender score to watch the pool at work.
scores = raw_similarity_matrix(corpus.raw)
pools = HardNegativePools(data.positives_by_user(TRAIN), data.num_items, k=10, m=30)
pools.init_all(seed=0)
rng = np.random.default_rng(0)
u = 0
for step in range(5):
    pool = pools.refresh(u, scores[u], rng)
    j = pools.select(u, proj)
    print(f"refresh {step}: pool mean score {scores[u, pool].mean():+.3f}, "
          f"chosen item {j} score {scores[u, j]:+.3f}")

# Sigmoid weights barely separate scores near zero, so the pool is close to a
# uniform draw, and the argmin over semantic similarity then favours items the
# user is least likely to want.
w = 1 / (1 + np.exp(-scores[u]))
print(f"sigmoid weights for user {u}: min {w.min():.3f}, max {w.max():.3f}")
