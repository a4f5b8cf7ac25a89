"""Pairwise ranking and contrastive losses with analytic gradients.

Every loss returns ``(value, grads)`` where ``grads`` matches the arrays it was
given. Losses are dtype-agnostic: float32 during training, float64 in the
gradient checks.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .backbone import Representations

_EPS = 1e-12


def log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(log_sigmoid(x))


def l2_normalize(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Row-normalize; returns (unit rows, row norms)."""
    norms = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), _EPS)
    return x / norms, norms


def l2_normalize_backward(grad_unit: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    return (grad_unit - np.sum(grad_unit * unit, axis=1, keepdims=True) * unit) / norms


def _logsumexp(s: np.ndarray) -> np.ndarray:
    m = s.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(s - m).sum(axis=1, keepdims=True)))[:, 0]


def _softmax(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def info_nce(anchors: np.ndarray, candidates: np.ndarray, positive: np.ndarray, tau: float,
             cosine: bool = True):
    """Mean over anchors of ``-log softmax(sim(a_b, C) / tau)[positive[b]]``.

    Returns ``(loss, grad_anchors, grad_candidates)``. With ``cosine`` the
    similarity is cosine, otherwise the raw dot product.
    """
    n = anchors.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(anchors), np.zeros_like(candidates)
    if cosine:
        a, a_norm = l2_normalize(anchors)
        c, c_norm = l2_normalize(candidates)
    else:
        a, c = anchors, candidates
    logits = (a @ c.T) / tau
    rows = np.arange(n)
    loss = float(np.mean(_logsumexp(logits) - logits[rows, positive]))
    g = _softmax(logits)
    g[rows, positive] -= 1.0
    g /= n * tau
    ga = g @ c
    gc = g.T @ a
    if cosine:
        ga = l2_normalize_backward(ga, a, a_norm)
        gc = l2_normalize_backward(gc, c, c_norm)
    return loss, ga, gc


def bpr_loss(user_vecs: np.ndarray, pos_vecs: np.ndarray, neg_vecs: np.ndarray):
    """Mean ``-log sigmoid(<u, i> - <u, j>)`` over rows; grads for all three inputs."""
    n = user_vecs.shape[0]
    margin = np.sum(user_vecs * (pos_vecs - neg_vecs), axis=1)
    loss = float(-np.mean(log_sigmoid(margin)))
    coef = (-sigmoid(-margin) / n)[:, None].astype(user_vecs.dtype)
    return loss, coef * (pos_vecs - neg_vecs), coef * user_vecs, -coef * user_vecs


def _zeros(rep: Representations):
    return np.zeros_like(rep.user), np.zeros_like(rep.item)


def cross_graph_loss(rep_g: Representations, rep_gp: Representations, pairs: np.ndarray, tau_de: float = 0.5):
    """In-batch cross-graph alignment between views of G and the edited graph G'.

    Sum of two terms: anchors from G' users against batch items of G, and anchors
    from G users against batch items of G'. The denominator for anchor b runs
    over every batch pair's item (duplicates included, no positive exclusion).

    Returns ``(loss, (g_user, g_item), (gp_user, gp_item))``.
    """
    pairs = np.asarray(pairs).reshape(-1, 2)
    us, its = pairs[:, 0], pairs[:, 1]
    diag = np.arange(len(pairs))
    g_user, g_item = _zeros(rep_g)
    gp_user, gp_item = _zeros(rep_gp)

    l1, ga, gc = info_nce(rep_gp.user[us], rep_g.item[its], diag, tau_de)
    np.add.at(gp_user, us, ga)
    np.add.at(g_item, its, gc)
    l2, ga, gc = info_nce(rep_g.user[us], rep_gp.item[its], diag, tau_de)
    np.add.at(g_user, us, ga)
    np.add.at(gp_item, its, gc)
    return l1 + l2, (g_user, g_item), (gp_user, gp_item)


def _view_nce(v1: np.ndarray, v2: np.ndarray, anchors: np.ndarray, tau: float,
              num_negatives: Optional[int], rng):
    if num_negatives is None or num_negatives >= v2.shape[0]:
        cols = np.arange(v2.shape[0])
        positive = anchors
    else:
        extra = rng.choice(v2.shape[0], size=num_negatives, replace=False)
        cols = np.union1d(anchors, extra)
        positive = np.searchsorted(cols, anchors)
    loss, ga, gc = info_nce(v1[anchors], v2[cols], positive, tau)
    g1 = np.zeros_like(v1)
    g2 = np.zeros_like(v2)
    np.add.at(g1, anchors, ga)
    np.add.at(g2, cols, gc)
    return loss, g1, g2


def hallucination_loss(rep_1: Representations, rep_2: Representations, tau_hal: float = 0.5,
                       users: Optional[np.ndarray] = None, items: Optional[np.ndarray] = None,
                       num_negatives: Optional[int] = None, rng=None):
    """Node-level InfoNCE between two edge-dropped views.

    ``rep_1`` comes from the edited graph's augmentation, ``rep_2`` from the
    original graph's. Each anchor's positive is its own vector in the other
    view; negatives are all other nodes of the same type, or ``num_negatives``
    sampled ones. Anchors default to every user and item; each side is a mean
    over its anchors.

    Returns ``(loss, (g1_user, g1_item), (g2_user, g2_item))``.
    """
    users = np.arange(rep_1.user.shape[0]) if users is None else np.unique(users)
    items = np.arange(rep_1.item.shape[0]) if items is None else np.unique(items)
    if num_negatives is not None and rng is None:
        raise ValueError("sampled negatives need an rng")
    lu, g1u, g2u = _view_nce(rep_1.user, rep_2.user, users, tau_hal, num_negatives, rng)
    li, g1i, g2i = _view_nce(rep_1.item, rep_2.item, items, tau_hal, num_negatives, rng)
    return lu + li, (g1u, g1i), (g2u, g2i)


@dataclass(frozen=True)
class LossBreakdown:
    l_rec: float
    l_de: float
    l_hal: float
    l_total: float
    lambda1: float
    lambda2: float


def total_loss(l_rec: float, l_de: float, l_hal: float, lambda1: float = 0.1, lambda2: float = 0.1) -> LossBreakdown:
    parts = np.array([l_rec, l_de, l_hal], dtype=np.float64)
    if not np.isfinite(parts).all():
        raise FloatingPointError(f"non-finite loss component: rec={l_rec} de={l_de} hal={l_hal}")
    return LossBreakdown(float(l_rec), float(l_de), float(l_hal),
                         float(l_rec + lambda1 * l_de + lambda2 * l_hal), lambda1, lambda2)
