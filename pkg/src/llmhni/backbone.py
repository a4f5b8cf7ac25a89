"""Embedding tables, LightGCN propagation and inner-product scoring.

Propagation is linear in the table: ``out = P @ table`` with
``P = mean(A^0, ..., A^L)``. ``A`` is symmetric, so the backward pass is the
same operation applied to the output gradient.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .graph import NormalizedAdjacency

CHECKPOINT_MAGIC = b"LHNI"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIQQI")


@dataclass
class EmbeddingTable:
    user: np.ndarray
    item: np.ndarray

    @property
    def d_rec(self) -> int:
        return self.user.shape[1]

    @property
    def num_users(self) -> int:
        return self.user.shape[0]

    @property
    def num_items(self) -> int:
        return self.item.shape[0]

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.user, self.item], axis=0)

    @classmethod
    def from_stacked(cls, x: np.ndarray, num_users: int) -> "EmbeddingTable":
        return cls(x[:num_users], x[num_users:])

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.user.copy(), self.item.copy())


@dataclass
class Representations:
    """Propagated user/item vectors; ``tag`` names the graph view (G, G', G_aug, G'_aug)."""

    user: np.ndarray
    item: np.ndarray
    tag: str = "G"


def init_embeddings(num_users: int, num_items: int, d_rec: int = 64, seed: int = 0,
                    std: float = 0.01, dtype=np.float32) -> EmbeddingTable:
    if d_rec < 1:
        raise ValueError("d_rec must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, std, size=(num_users + num_items, d_rec)).astype(dtype)
    return EmbeddingTable.from_stacked(x, num_users)


def _smooth(x: np.ndarray, adj: NormalizedAdjacency, layers: int) -> np.ndarray:
    if layers < 0:
        raise ValueError("layer count must be >= 0")
    m = adj.matrix if adj.matrix.dtype == x.dtype else adj.matrix.astype(x.dtype)
    acc = x.copy()
    cur = x
    for _ in range(layers):
        cur = m @ cur
        acc += cur
    return acc / (layers + 1)


def propagate(table: EmbeddingTable, adj: NormalizedAdjacency, layers: int = 3, tag: str = "G") -> Representations:
    """Mean over layers 0..L of ``A^k @ table``; ``layers=0`` gives the MF backbone."""
    if adj.num_users != table.num_users or adj.num_items != table.num_items:
        raise ValueError("adjacency and embedding table disagree on node counts")
    out = _smooth(table.stacked(), adj, layers)
    return Representations(out[:table.num_users], out[table.num_users:], tag)


def propagate_backward(grad_user: np.ndarray, grad_item: np.ndarray, adj: NormalizedAdjacency,
                       layers: int = 3) -> Tuple[np.ndarray, np.ndarray]:
    """Pull gradients w.r.t. propagated vectors back onto the embedding table."""
    g = _smooth(np.concatenate([grad_user, grad_item], axis=0), adj, layers)
    return g[:adj.num_users], g[adj.num_users:]


def score(rep: Representations, u: int, i: int) -> float:
    if not 0 <= u < rep.user.shape[0]:
        raise IndexError(f"user id {u} out of range")
    if not 0 <= i < rep.item.shape[0]:
        raise IndexError(f"item id {i} out of range")
    return float(rep.user[u] @ rep.item[i])


def score_all(rep: Representations, u) -> np.ndarray:
    """Scores of every item for user ``u`` (or a 2-D block for an index array)."""
    u_arr = np.asarray(u)
    if (u_arr < 0).any() or (u_arr >= rep.user.shape[0]).any():
        raise IndexError(f"user id {u} out of range")
    return rep.user[u] @ rep.item.T


def save_table(table: EmbeddingTable, path) -> None:
    """Little-endian header (magic, version, num_users, num_items, d_rec) then float32 rows."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, table.num_users, table.num_items, table.d_rec))
        fh.write(np.ascontiguousarray(table.stacked(), dtype="<f4").tobytes())


def load_table(path) -> EmbeddingTable:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, version, nu, ni, d = _HEADER.unpack(head)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        body = np.frombuffer(fh.read(), dtype="<f4")
    if body.size != (nu + ni) * d:
        raise ValueError(f"{path}: expected {(nu + ni) * d} floats, found {body.size}")
    return EmbeddingTable.from_stacked(body.reshape(nu + ni, d).astype(np.float32), nu)
