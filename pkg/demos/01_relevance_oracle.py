"""
Rating candidate pairs and editing the graph
============================================

A pretrained recommender proposes suspicious pairs, a relevance oracle rates
them, and the interaction graph is rewritten from the verdicts.
"""
import numpy as np

from llmhni.data import TRAIN, split_dataset
from llmhni.graph import apply_relevance_edits, build_graph
from llmhni.oracle import MockProvider, build_candidates, classify, rate_candidates, render
from llmhni.synthetic import generate_corpus
from llmhni.trainer import Pipeline, TrainConfig

corpus = generate_corpus(seed=0)
data = split_dataset(corpus.dataset, (0.6, 0.2, 0.2), seed=0)
print(f"{data.num_users} users, {data.num_items} items, {len(data.pairs(TRAIN))} train pairs")

# A short plain-BPR run is enough to rank items for candidate selection.
pipe = Pipeline(TrainConfig(batch_size=64, epochs=30, init_std=0.1), data)
pipe.pretrain()
scores = pipe.pretrain_scores

# Per user: the two best-scored non-interactions and the two worst-scored positives.
positives = data.positives_by_user(TRAIN)
candidates = build_candidates(scores, positives, n1=2, n2=2)
print(f"{len(candidates)} candidates, first three:")
for c in candidates[:3]:
    print("   ", c)

# What a language-model provider would receive for the first pair.
u, i = candidates[0].user, candidates[0].item
print(render("user", {"user_profile": corpus.profiles.user_profiles[u],
                      "item_profile": corpus.profiles.item_profiles[i]})[:300], "...")

# The mock provider answers High exactly on the generator's hidden relevant pairs.
provider = MockProvider(corpus.relevant, flip_rate=0.0)
verdicts = rate_candidates(provider, candidates, scores, positives, corpus.profiles)
hard, noisy = classify(verdicts, candidates)
print(f"C_H (added): {len(hard)}   C_N (removed): {len(noisy)}   provider calls: {provider.calls}")

g = build_graph(data)
edited = apply_relevance_edits(g, hard, noisy)
print(f"|E| = {len(g)}  ->  |E'| = {len(edited)}")

# With a perfect oracle every added edge is truly relevant.
assert hard == {(c.user, c.item) for c in candidates} & corpus.relevant

# A noisier oracle flips some answers.
flipped = MockProvider(corpus.relevant, flip_rate=0.2, seed=1)
hard2, _ = classify(rate_candidates(flipped, candidates, scores, positives), candidates)
precision = len(hard2 & corpus.relevant) / max(len(hard2), 1)
print(f"flip rate 0.2: |C_H| = {len(hard2)}, precision {precision:.3f}")
