"""Latent-factor synthetic corpus with planted relevance, text profiles and raw "LLM" embeddings.

Users and items get Gaussian latent factors. For each user the top
``relevance_quantile`` fraction of items by latent affinity are relevant; each
relevant pair is observed with probability ``observe_rate``. Raw semantic
embeddings embed the latent factors through a shared random map, add
per-vector noise, and add one offset per side so users and items sit in
separate regions of the raw space, as text embeddings of different prose do.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Set, Tuple

import numpy as np

from .data import InteractionDataset, ProfileStore, from_pairs
from .semantic import RawSemanticEmbeddings

_TOPICS = ("horror", "romance", "history", "science", "fantasy", "mystery", "travel", "cooking",
           "poetry", "business", "sports", "music", "art", "politics", "comedy", "nature")


@dataclass
class SyntheticCorpus:
    dataset: InteractionDataset
    relevant: Set[Tuple[int, int]]
    affinity: np.ndarray
    raw: RawSemanticEmbeddings
    profiles: ProfileStore
    user_factors: np.ndarray
    item_factors: np.ndarray


def generate_corpus(num_users: int = 200, num_items: int = 100, d_latent: int = 8,
                    relevance_quantile: float = 0.1, observe_rate: float = 0.8, d_llm: int = 128,
                    semantic_noise: float = 0.5, side_offset: float = 1.0, seed: int = 0) -> SyntheticCorpus:
    rng = np.random.default_rng(seed)
    uf = rng.normal(size=(num_users, d_latent))
    vf = rng.normal(size=(num_items, d_latent))
    affinity = uf @ vf.T / np.sqrt(d_latent)

    n_rel = max(1, int(round(relevance_quantile * num_items)))
    order = np.argsort(-affinity, axis=1, kind="stable")[:, :n_rel]
    relevant = {(u, int(i)) for u in range(num_users) for i in order[u]}
    observed = [(u, i) for u, i in sorted(relevant) if rng.random() < observe_rate]
    dataset = from_pairs(observed, num_users, num_items)

    basis, _ = np.linalg.qr(rng.normal(size=(d_llm, d_latent + 2)))
    latent_map, u_dir, i_dir = basis[:, :d_latent], basis[:, d_latent], basis[:, d_latent + 1]
    scale = np.sqrt(d_latent) ** 0.5
    user_raw = (uf / scale) @ latent_map.T + side_offset * u_dir
    item_raw = (vf / scale) @ latent_map.T + side_offset * i_dir
    user_raw += semantic_noise * rng.normal(size=user_raw.shape) / np.sqrt(d_llm) * np.sqrt(d_latent)
    item_raw += semantic_noise * rng.normal(size=item_raw.shape) / np.sqrt(d_llm) * np.sqrt(d_latent)
    raw = RawSemanticEmbeddings(user_raw, item_raw)

    profiles = ProfileStore()
    topics = [_TOPICS[k % len(_TOPICS)] for k in range(d_latent)]
    for u in range(num_users):
        top = np.argsort(-uf[u])[:2]
        profiles.user_profiles[u] = f"Enjoys {topics[top[0]]} and {topics[top[1]]} titles."
    for i in range(num_items):
        top = np.argsort(-vf[i])[:2]
        profiles.item_profiles[i] = f"A {topics[top[0]]} title with {topics[top[1]]} elements."
    return SyntheticCorpus(dataset, relevant, affinity, raw, profiles, uf, vf)
