"""Per-user hard-negative pools with semantic filtering, and the mined-negative BPR loss.

Each user keeps a pool of K non-interacted items. A refresh draws M fresh
uniform negatives and resamples K items from pool + fresh with weights
sigmoid(score), so higher-scored items tend to stay. The negative used in the
loss is the pool item least similar to the user in the aligned semantic space,
which steers away from likely false negatives.
"""
from __future__ import annotations

import json
from typing import List, Optional, Sequence

import numpy as np

from .backbone import Representations
from .losses import bpr_loss, sigmoid
from .semantic import ProjectedSemanticEmbeddings


def _sample_uniform_negatives(excluded: np.ndarray, num_items: int, size: int, rng) -> np.ndarray:
    """``size`` iid uniform draws from items not in sorted ``excluded``."""
    n_free = num_items - len(excluded)
    if n_free <= 0:
        raise ValueError("user has no negative items")
    # k-th free item = k + number of excluded ids <= it; invert via searchsorted on shifted ids
    ranks = rng.integers(0, n_free, size=size)
    shifted = excluded - np.arange(len(excluded))
    return ranks + np.searchsorted(shifted, ranks, side="right")


def init_pool(excluded: np.ndarray, num_items: int, k: int = 10, seed=0) -> np.ndarray:
    """K distinct uniform negatives (all of them when fewer than K exist), sorted."""
    excluded = np.unique(excluded)
    free = np.setdiff1d(np.arange(num_items), excluded, assume_unique=True)
    if len(free) == 0:
        raise ValueError("user has no negative items")
    if len(free) <= k:
        return free
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(free, size=k, replace=False))


def weighted_sample_without_replacement(weights: np.ndarray, k: int, rng) -> np.ndarray:
    """Indices of ``k`` draws without replacement, P proportional to ``weights`` (Efraimidis-Spirakis keys)."""
    keys = np.log(rng.random(len(weights))) / weights
    return np.argsort(-keys, kind="stable")[:k]


def refresh_pool(pool: np.ndarray, excluded: np.ndarray, num_items: int, scores: np.ndarray,
                 m: int = 30, k: int = 10, rng=None) -> np.ndarray:
    """Resample the pool from ``pool`` plus ``m`` fresh uniform negatives.

    ``scores`` holds the current prediction score of every item for the user.
    """
    if m < 0:
        raise ValueError("M must be >= 0")
    rng = np.random.default_rng(rng)
    fresh = _sample_uniform_negatives(excluded, num_items, m, rng) if m else np.zeros(0, np.int64)
    union = np.union1d(pool, fresh)
    if len(union) <= k:
        return union
    weights = sigmoid(np.asarray(scores[union], dtype=np.float64))
    weights = np.maximum(weights, np.finfo(np.float64).tiny)
    return np.sort(union[weighted_sample_without_replacement(weights, k, rng)])


def select_hard_negative(pool: np.ndarray, projected: ProjectedSemanticEmbeddings, u: int) -> int:
    """Pool item with the lowest cosine to the user; ties to the smaller id."""
    if len(pool) == 0:
        raise ValueError("empty hard-negative pool")
    pool = np.asarray(pool)
    sims = projected.similarity(u, pool)
    order = np.lexsort((pool, sims))
    return int(pool[order[0]])


def mined_bpr_loss(pairs: np.ndarray, rep: Representations, negatives: np.ndarray):
    """Mean BPR loss over (u, i) pairs with one negative per pair.

    Returns ``(loss, (grad_user, grad_item))`` w.r.t. the representation arrays.
    Chain through ``backbone.propagate_backward`` for table gradients.
    """
    pairs = np.asarray(pairs).reshape(-1, 2)
    us, its, js = pairs[:, 0], pairs[:, 1], np.asarray(negatives)
    loss, gu, gi, gj = bpr_loss(rep.user[us], rep.item[its], rep.item[js])
    g_user = np.zeros_like(rep.user)
    g_item = np.zeros_like(rep.item)
    np.add.at(g_user, us, gu)
    np.add.at(g_item, its, gi)
    np.add.at(g_item, js, gj)
    return loss, (g_user, g_item)


class HardNegativePools:
    """Pools for every user plus the per-user excluded item sets.

    ``excluded[u]`` is every item that may not serve as u's negative: its train
    positives and any pair promoted to a hard positive by the relevance oracle.
    """

    def __init__(self, excluded: Sequence[np.ndarray], num_items: int, k: int = 10, m: int = 30):
        self.excluded = [np.unique(np.asarray(e, dtype=np.int64)) for e in excluded]
        self.num_items = num_items
        self.k = k
        self.m = m
        self.pools: List[Optional[np.ndarray]] = [None] * len(self.excluded)

    @property
    def num_users(self) -> int:
        return len(self.excluded)

    def init_all(self, seed: int) -> None:
        for u in range(self.num_users):
            if len(self.excluded[u]) < self.num_items:
                self.pools[u] = init_pool(self.excluded[u], self.num_items, self.k, seed=[seed, u])

    def refresh(self, u: int, scores: np.ndarray, rng) -> np.ndarray:
        self.pools[u] = refresh_pool(self.pools[u], self.excluded[u], self.num_items, scores, self.m, self.k, rng)
        return self.pools[u]

    def select(self, u: int, projected: ProjectedSemanticEmbeddings) -> int:
        return select_hard_negative(self.pools[u], projected, u)

    def uniform(self, u: int, size: int, rng) -> np.ndarray:
        return _sample_uniform_negatives(self.excluded[u], self.num_items, size, rng)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for u, pool in enumerate(self.pools):
                if pool is not None:
                    fh.write(json.dumps({"user": u, "pool": [int(x) for x in pool]}) + "\n")

    def load(self, path) -> None:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    self.pools[int(rec["user"])] = np.array(rec["pool"], dtype=np.int64)
