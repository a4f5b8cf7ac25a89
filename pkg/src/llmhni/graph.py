"""Bipartite user-item graph: construction, relevance edits, edge drop, normalization."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Tuple

import numpy as np
import scipy.sparse as sp

from .data import TRAIN, InteractionDataset


@dataclass(frozen=True)
class InteractionGraph:
    """Edge set over users x items, stored as sorted unique keys ``u * num_items + i``."""

    num_users: int
    num_items: int
    keys: np.ndarray

    def __post_init__(self):
        keys = np.unique(np.asarray(self.keys, dtype=np.int64))
        if len(keys) and (keys[0] < 0 or keys[-1] >= self.num_users * self.num_items):
            raise ValueError("edge endpoint out of range")
        keys.setflags(write=False)
        object.__setattr__(self, "keys", keys)

    @classmethod
    def from_pairs(cls, num_users: int, num_items: int, pairs) -> "InteractionGraph":
        p = np.asarray(list(pairs) if not isinstance(pairs, np.ndarray) else pairs, dtype=np.int64).reshape(-1, 2)
        if len(p) and ((p < 0).any() or p[:, 0].max() >= num_users or p[:, 1].max() >= num_items):
            raise ValueError("edge endpoint out of range")
        return cls(num_users, num_items, p[:, 0] * num_items + p[:, 1])

    @property
    def users(self) -> np.ndarray:
        return self.keys // self.num_items

    @property
    def items(self) -> np.ndarray:
        return self.keys % self.num_items

    @property
    def pairs(self) -> np.ndarray:
        return np.stack([self.users, self.items], axis=1)

    @property
    def edges(self) -> set:
        return {(int(u), int(i)) for u, i in zip(self.users, self.items)}

    def __len__(self) -> int:
        return len(self.keys)

    def _pair_keys(self, pairs) -> np.ndarray:
        p = np.asarray(list(pairs) if not isinstance(pairs, np.ndarray) else pairs, dtype=np.int64).reshape(-1, 2)
        return p[:, 0] * self.num_items + p[:, 1]


def build_graph(ds: InteractionDataset) -> InteractionGraph:
    """One edge per train positive (injected noise included; the graph cannot tell)."""
    return InteractionGraph.from_pairs(ds.num_users, ds.num_items, ds.pairs(TRAIN))


def apply_relevance_edits(g: InteractionGraph, hard: Iterable[Tuple[int, int]],
                          noisy: Iterable[Tuple[int, int]]) -> InteractionGraph:
    """E' = (E minus noisy pairs) union hard pairs."""
    hard_keys = np.unique(g._pair_keys(hard))
    noisy_keys = np.unique(g._pair_keys(noisy))
    overlap = np.intersect1d(hard_keys, noisy_keys)
    if len(overlap):
        shown = [(int(k // g.num_items), int(k % g.num_items)) for k in overlap[:5]]
        raise ValueError(f"hard and noisy sets overlap on {len(overlap)} pair(s), e.g. {shown}")
    kept = np.setdiff1d(g.keys, noisy_keys, assume_unique=True)
    return InteractionGraph(g.num_users, g.num_items, np.union1d(kept, hard_keys))


def edge_drop(g: InteractionGraph, rho: float, seed) -> InteractionGraph:
    """Drop each edge independently with probability ``rho``.

    One uniform draw per edge in key order: edge k survives iff ``u_k >= rho``.
    ``seed`` is anything ``np.random.default_rng`` accepts.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"drop probability must lie in [0, 1], got {rho}")
    keep = np.random.default_rng(seed).random(len(g.keys)) >= rho
    return InteractionGraph(g.num_users, g.num_items, g.keys[keep])


@dataclass(frozen=True)
class NormalizedAdjacency:
    """Symmetric D^-1/2 A D^-1/2 over users followed by items, CSR, no self loops."""

    num_users: int
    num_items: int
    matrix: sp.csr_matrix

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items


def normalize(g: InteractionGraph, dtype=np.float64) -> NormalizedAdjacency:
    nu, ni = g.num_users, g.num_items
    u, i = g.users, g.items
    du = np.bincount(u, minlength=nu).astype(np.float64)
    di = np.bincount(i, minlength=ni).astype(np.float64)
    w = 1.0 / np.sqrt(du[u] * di[i]) if len(u) else np.zeros(0)
    rows = np.concatenate([u, nu + i])
    cols = np.concatenate([nu + i, u])
    m = sp.csr_matrix((np.concatenate([w, w]).astype(dtype), (rows, cols)), shape=(nu + ni, nu + ni))
    m.sort_indices()
    return NormalizedAdjacency(nu, ni, m)


def save_edges(g: InteractionGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, i in zip(g.users, g.items):
            fh.write(f"{u}\t{i}\n")


def load_edges(path, num_users: int, num_items: int) -> InteractionGraph:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            try:
                pairs.append((int(cols[0]), int(cols[1])))
            except (IndexError, ValueError):
                raise ValueError(f"{path}:{lineno}: expected user_id<TAB>item_id") from None
    return InteractionGraph.from_pairs(num_users, num_items, pairs)
