import math

import numpy as np
import pytest

from llmhni.backbone import Representations
from llmhni.losses import (bpr_loss, cross_graph_loss, hallucination_loss, info_nce, l2_normalize, total_loss)
from llmhni.negatives import mined_bpr_loss

from conftest import central_difference, rel_error


def rand_rep(rng, nu=5, ni=6, d=4):
    return Representations(rng.normal(size=(nu, d)), rng.normal(size=(ni, d)))


def test_bpr_zero_margin_is_ln2():
    v = np.ones((3, 4))
    loss, *_ = bpr_loss(v, v, v)
    assert abs(loss - math.log(2)) <= 1e-9


def test_bpr_margin_two():
    u = np.array([[1.0, 0.0]])
    loss, *_ = bpr_loss(u, np.array([[2.0, 0.0]]), np.zeros((1, 2)))
    assert loss == pytest.approx(math.log1p(math.exp(-2)), abs=1e-12)
    assert loss == pytest.approx(0.126928, abs=1e-6)


def test_bpr_large_margins_stay_finite():
    u = np.array([[1.0], [1.0]])
    loss, gu, gi, gj = bpr_loss(u, np.array([[800.0], [-800.0]]), np.zeros((2, 1)))
    assert np.isfinite(loss) and np.isfinite(gu).all()
    assert loss == pytest.approx(800.0 / 2, rel=1e-9)


def test_mined_bpr_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    rep = rand_rep(rng)
    pairs = np.array([[0, 1], [2, 3], [0, 4], [4, 0]])
    negs = np.array([2, 5, 5, 1])
    _, (gu, gi) = mined_bpr_loss(pairs, rep, negs)
    nu = central_difference(lambda: mined_bpr_loss(pairs, rep, negs)[0], rep.user)
    ni = central_difference(lambda: mined_bpr_loss(pairs, rep, negs)[0], rep.item)
    assert rel_error(gu, nu) <= 1e-4 and rel_error(gi, ni) <= 1e-4


def test_cross_graph_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    g, gp = rand_rep(rng), rand_rep(rng)
    batch = np.array([[0, 1], [1, 2], [3, 1], [4, 5], [0, 0]])
    _, (a, b), (c, d) = cross_graph_loss(g, gp, batch, 0.5)
    f = lambda: cross_graph_loss(g, gp, batch, 0.5)[0]  # noqa: E731
    for analytic, x in ((a, g.user), (b, g.item), (c, gp.user), (d, gp.item)):
        assert rel_error(analytic, central_difference(f, x)) <= 1e-4


@pytest.mark.parametrize("num_negatives", [None, 3])
def test_hallucination_gradient_matches_finite_differences(num_negatives):
    rng = np.random.default_rng(2)
    r1, r2 = rand_rep(rng), rand_rep(rng)
    users, items = np.array([0, 2, 2, 4]), np.array([1, 5])
    kw = dict(users=users, items=items, num_negatives=num_negatives)

    def f():
        return hallucination_loss(r1, r2, 0.7, rng=np.random.default_rng(9), **kw)[0]

    _, (a, b), (c, d) = hallucination_loss(r1, r2, 0.7, rng=np.random.default_rng(9), **kw)
    for analytic, x in ((a, r1.user), (b, r1.item), (c, r2.user), (d, r2.item)):
        assert rel_error(analytic, central_difference(f, x)) <= 1e-4


def test_equal_logit_cross_graph_term_is_log_batch():
    for size in (1, 2, 7, 64):
        same = np.tile([[0.6, 0.8]], (size, 1))
        loss, *_ = info_nce(same, same, np.arange(size), 0.5)
        assert abs(loss - math.log(size)) <= 1e-9
    rep = Representations(np.ones((3, 2)), np.ones((4, 2)))
    batch = np.array([[0, 0], [1, 2], [2, 3], [0, 1]])
    loss, *_ = cross_graph_loss(rep, rep, batch, 0.3)
    assert abs(loss - 2 * math.log(4)) <= 1e-9


def test_orthogonal_equal_views_closed_form():
    z = np.eye(3)
    rep = Representations(z, np.zeros((0, 3)))
    loss, *_ = hallucination_loss(rep, rep, 0.5, users=np.arange(3), items=np.zeros(0, np.int64))
    # -log(e^2 / (e^2 + 2)) = log(1 + 2 e^-2) = 0.2395447...
    expected = -math.log(math.e ** 2 / (math.e ** 2 + 2))
    assert abs(loss - 0.2395448) <= 1e-4
    assert loss == pytest.approx(expected, abs=1e-12)


def test_hallucination_rotation_invariant():
    rng = np.random.default_rng(3)
    r1, r2 = rand_rep(rng, d=5), rand_rep(rng, d=5)
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    rot = lambda r: Representations(r.user @ q, r.item @ q)  # noqa: E731
    a = hallucination_loss(r1, r2, 0.5)[0]
    b = hallucination_loss(rot(r1), rot(r2), 0.5)[0]
    assert abs(a - b) <= 1e-6


def test_raising_one_pair_similarity_lowers_loss():
    # with one-hot anchors and dot similarity the logit matrix is set directly
    rng = np.random.default_rng(4)
    s = rng.normal(size=(4, 4))
    before, *_ = info_nce(np.eye(4), s.T.copy(), np.arange(4), 1.0, cosine=False)
    s[2, 2] += 0.05
    after, *_ = info_nce(np.eye(4), s.T.copy(), np.arange(4), 1.0, cosine=False)
    assert after < before


def test_contrastive_losses_nonnegative():
    rng = np.random.default_rng(5)
    for _ in range(20):
        a, b = rand_rep(rng), rand_rep(rng)
        assert cross_graph_loss(a, b, np.array([[0, 0], [1, 1]]), 0.2)[0] >= 0
        assert hallucination_loss(a, b, 0.2)[0] >= 0


def test_total_loss_combination():
    p = total_loss(0.5, 2.0, 3.0, 0.1, 0.2)
    assert p.l_total == pytest.approx(0.5 + 0.2 + 0.6, abs=1e-12)
    assert total_loss(0.5, 2.0, 3.0, 0.0, 0.0).l_total == 0.5
    doubled = total_loss(0.5, 2.0, 3.0, 0.2, 0.2).l_total
    assert doubled - p.l_total == pytest.approx(0.1 * 2.0, abs=1e-12)


@pytest.mark.parametrize("lam", [0.1, 0.3, 0.5, 0.7, 1.0])
def test_total_loss_accepts_sweep_grid(lam):
    assert total_loss(1.0, 1.0, 1.0, lam, lam).l_total == pytest.approx(1 + 2 * lam)


def test_total_loss_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        total_loss(float("nan"), 0.0, 0.0)


def test_l2_normalize_units():
    x, norms = l2_normalize(np.array([[3.0, 4.0], [0.0, 2.0]]))
    assert np.allclose(np.linalg.norm(x, axis=1), 1.0)
    assert np.allclose(norms.ravel(), [5.0, 2.0])
