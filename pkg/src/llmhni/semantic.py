"""LLM profile embeddings and the objective-alignment projector.

Raw text embeddings (one vector per user and item) are projected to the
recommender's dimension by a one-hidden-layer MLP. The MLP is trained with an
InfoNCE over reliable positives: train positives of a user that also rank in
the user's top-N items by raw cosine similarity.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import TRAIN, InteractionDataset
from .losses import l2_normalize, l2_normalize_backward
from .optim import AdamState, adam_step

_EMB_MAGIC = b"LHNE"
_EMB_HEADER = struct.Struct("<4sIQQI")


@dataclass
class RawSemanticEmbeddings:
    user: np.ndarray
    item: np.ndarray

    def __post_init__(self):
        if self.user.ndim != 2 or self.item.ndim != 2:
            raise ValueError("embeddings must be 2-D")
        if self.user.shape[1] != self.item.shape[1]:
            raise ValueError(f"dimension mismatch: users have {self.user.shape[1]}, items have {self.item.shape[1]}")
        for name, m in (("user", self.user), ("item", self.item)):
            if not np.isfinite(m).all():
                raise ValueError(f"non-finite {name} embedding")
            zero = np.flatnonzero(np.linalg.norm(m, axis=1) == 0)
            if len(zero):
                raise ValueError(f"zero-norm {name} embedding(s): {zero[:10].tolist()}")

    @property
    def dim(self) -> int:
        return self.user.shape[1]


def read_embedding_file(path, ids: Optional[Sequence[str]] = None) -> np.ndarray:
    """Read ``count dim`` + ``id v1 .. v_dim`` lines (or the binary variant) into a dense matrix.

    ``ids`` lists original id strings in dense order; without it ids must be
    the dense integers ``0..count-1``.
    """
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == _EMB_MAGIC:
        with open(path, "rb") as fh:
            _, _, count, _, dim = _EMB_HEADER.unpack(fh.read(_EMB_HEADER.size))
            return np.frombuffer(fh.read(), dtype="<f4").reshape(count, dim).astype(np.float64)
    rows: Dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().split()
        if len(first) != 2:
            raise ValueError(f"{path}:1: expected 'count dim' header")
        count, dim = int(first[0]), int(first[1])
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise ValueError(f"{path}:{lineno}: expected id plus {dim} values, got {len(parts) - 1}")
            rows[parts[0]] = np.array(parts[1:], dtype=np.float64)
    if len(rows) != count:
        raise ValueError(f"{path}: header announces {count} rows, found {len(rows)}")
    wanted = list(ids) if ids is not None else [str(k) for k in range(count)]
    missing = [w for w in wanted if w not in rows]
    if missing:
        raise ValueError(f"{path}: missing embeddings for ids {missing[:20]}")
    return np.stack([rows[w] for w in wanted]) if wanted else np.zeros((0, dim))


def write_embedding_file(path, matrix: np.ndarray, binary: bool = False) -> None:
    if binary:
        with open(path, "wb") as fh:
            fh.write(_EMB_HEADER.pack(_EMB_MAGIC, 1, matrix.shape[0], 0, matrix.shape[1]))
            fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())
        return
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{matrix.shape[0]} {matrix.shape[1]}\n")
        for k, row in enumerate(matrix):
            fh.write(str(k) + " " + " ".join(repr(float(v)) for v in row) + "\n")


def ingest_llm_embeddings(user_file, item_file, user_ids=None, item_ids=None) -> RawSemanticEmbeddings:
    return RawSemanticEmbeddings(read_embedding_file(user_file, user_ids), read_embedding_file(item_file, item_ids))


def raw_similarity(raw: RawSemanticEmbeddings, u: int, i: int) -> float:
    a, b = raw.user[u], raw.item[i]
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine undefined for zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def raw_similarity_matrix(raw: RawSemanticEmbeddings) -> np.ndarray:
    u, _ = l2_normalize(raw.user)
    i, _ = l2_normalize(raw.item)
    return u @ i.T


def top_n_items(sim_row: np.ndarray, n: int) -> np.ndarray:
    """Indices of the ``n`` largest entries; ties go to the smaller item id."""
    order = np.lexsort((np.arange(len(sim_row)), -sim_row))
    return order[:n]


def build_alignment_labels(raw: RawSemanticEmbeddings, train: InteractionDataset, n: int = 50) -> Dict[int, np.ndarray]:
    """user -> sorted reliable positives (train positives within the user's raw top-N).

    Users with an empty intersection are left out.
    """
    if n < 1:
        raise ValueError("N must be >= 1")
    sim = raw_similarity_matrix(raw)
    positives = train.positives_by_user(TRAIN)
    labels = {}
    for u, pos in enumerate(positives):
        if len(pos) == 0:
            continue
        hit = np.intersect1d(pos, top_n_items(sim[u], n))
        if len(hit):
            labels[u] = hit
    return labels


@dataclass
class Projector:
    """``d_llm -> hidden (tanh) -> d_rec`` followed by L2 normalization."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    history: List[float] = field(default_factory=list, compare=False)

    @classmethod
    def init(cls, d_llm: int, d_rec: int = 64, hidden: int = 256, seed: int = 0) -> "Projector":
        rng = np.random.default_rng(seed)
        return cls(
            rng.normal(0, np.sqrt(1.0 / d_llm), (d_llm, hidden)), np.zeros(hidden),
            rng.normal(0, np.sqrt(1.0 / hidden), (hidden, d_rec)), np.zeros(d_rec),
        )

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def forward(self, x: np.ndarray):
        h = np.tanh(x @ self.w1 + self.b1)
        y = h @ self.w2 + self.b2
        z, norms = l2_normalize(y)
        return z, (x, h, z, norms)

    def backward(self, grad_z: np.ndarray, cache) -> Dict[str, np.ndarray]:
        x, h, z, norms = cache
        gy = l2_normalize_backward(grad_z, z, norms)
        gh = (gy @ self.w2.T) * (1.0 - h * h)
        return {"w1": x.T @ gh, "b1": gh.sum(0), "w2": h.T @ gy, "b2": gy.sum(0)}

    def save(self, path) -> None:
        np.savez(path, **self.params)

    @classmethod
    def load(cls, path) -> "Projector":
        with np.load(path) as f:
            return cls(f["w1"], f["b1"], f["w2"], f["b2"])


def alignment_loss(projector: Projector, raw: RawSemanticEmbeddings, users: np.ndarray, positives: np.ndarray,
                   negatives: np.ndarray, tau: float = 0.5):
    """Mean InfoNCE of (user, reliable positive) against per-pair sampled negatives.

    ``negatives`` has shape (batch, N). Returns ``(loss, param_grads)``.
    """
    uid, uinv = np.unique(users, return_inverse=True)
    cand = np.concatenate([positives[:, None], negatives], axis=1)
    iid, iinv = np.unique(cand, return_inverse=True)
    iinv = iinv.reshape(cand.shape)
    zu, cu = projector.forward(raw.user[uid])
    zi, ci = projector.forward(raw.item[iid])

    anchors = zu[uinv]
    cvecs = zi[iinv]
    logits = np.einsum("bd,bkd->bk", anchors, cvecs) / tau
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    lse = m[:, 0] + np.log(e.sum(axis=1))
    b = len(users)
    loss = float(np.mean(lse - logits[:, 0]))

    g = e / e.sum(axis=1, keepdims=True)
    g[:, 0] -= 1.0
    g /= b * tau
    g_anchor = np.einsum("bk,bkd->bd", g, cvecs)
    g_cand = g[:, :, None] * anchors[:, None, :]
    gzu = np.zeros_like(zu)
    np.add.at(gzu, uinv, g_anchor)
    gzi = np.zeros_like(zi)
    np.add.at(gzi, iinv.ravel(), g_cand.reshape(-1, zi.shape[1]))

    grads = projector.backward(gzu, cu)
    for k, v in projector.backward(gzi, ci).items():
        grads[k] = grads[k] + v
    return loss, grads


@dataclass
class ProjectorConfig:
    d_rec: int = 64
    hidden: int = 256
    tau: float = 0.5
    num_negatives: int = 50
    epochs: int = 50
    batch_size: int = 1024
    lr: float = 1e-3
    seed: int = 0


def train_projector(raw: RawSemanticEmbeddings, labels: Dict[int, np.ndarray], train: InteractionDataset,
                    cfg: Optional[ProjectorConfig] = None) -> Projector:
    """Fit the projector on the alignment labels with Adam.

    Negatives are redrawn every epoch, uniformly (with replacement) from items
    that are not train positives of the user. Per-epoch mean loss is appended
    to ``projector.history``.
    """
    cfg = cfg or ProjectorConfig()
    if not labels:
        raise ValueError("alignment label set is empty")
    pairs = np.array([(u, i) for u in sorted(labels) for i in labels[u]], dtype=np.int64)
    positives = train.positives_by_user(TRAIN)
    allowed = {}
    for u in labels:
        mask = np.ones(raw.item.shape[0], dtype=bool)
        mask[positives[u]] = False
        allowed[u] = np.flatnonzero(mask)
        if len(allowed[u]) == 0:
            raise ValueError(f"user {u} has no items outside its positives to sample negatives from")

    projector = Projector.init(raw.dim, cfg.d_rec, cfg.hidden, cfg.seed)
    params = projector.params
    state = AdamState()
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(pairs))
        negatives = np.empty((len(pairs), cfg.num_negatives), dtype=np.int64)
        for row, (u, _) in enumerate(pairs):
            pool = allowed[int(u)]
            negatives[row] = pool[rng.integers(0, len(pool), cfg.num_negatives)]
        losses = []
        for start in range(0, len(pairs), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = alignment_loss(projector, raw, pairs[idx, 0], pairs[idx, 1], negatives[idx], cfg.tau)
            adam_step(params, grads, state, lr=cfg.lr)
            losses.append(loss * len(idx))
        projector.history.append(sum(losses) / len(pairs))
    return projector


@dataclass
class ProjectedSemanticEmbeddings:
    user: np.ndarray
    item: np.ndarray

    def similarity(self, u: int, items: np.ndarray) -> np.ndarray:
        return self.item[items] @ self.user[u]


def project(projector: Projector, raw: RawSemanticEmbeddings) -> ProjectedSemanticEmbeddings:
    zu, _ = projector.forward(raw.user)
    zi, _ = projector.forward(raw.item)
    return ProjectedSemanticEmbeddings(zu, zi)
