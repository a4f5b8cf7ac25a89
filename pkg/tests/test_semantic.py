import math

import numpy as np
import pytest

from llmhni.data import from_pairs
from llmhni.semantic import (Projector, ProjectorConfig, RawSemanticEmbeddings, alignment_loss,
                             build_alignment_labels, ingest_llm_embeddings, project, raw_similarity,
                             raw_similarity_matrix, read_embedding_file, top_n_items, train_projector,
                             write_embedding_file)

from conftest import central_difference, rel_error


def write_text(path, rows):
    path.write_text(f"{len(rows)} {len(rows[0][1])}\n" + "".join(
        f"{k} " + " ".join(str(v) for v in vec) + "\n" for k, vec in rows))
    return path


def test_read_two_users_four_dims(tmp_path):
    p = write_text(tmp_path / "u.txt", [(0, [1, 2, 3, 4]), (1, [0, 0, 1, 0.5])])
    m = read_embedding_file(p)
    assert m.shape == (2, 4) and m[1, 3] == 0.5


def test_read_respects_id_order(tmp_path):
    p = write_text(tmp_path / "u.txt", [("b", [1, 0]), ("a", [0, 1])])
    assert np.array_equal(read_embedding_file(p, ids=["a", "b"]), [[0, 1], [1, 0]])


def test_missing_id_listed(tmp_path):
    p = write_text(tmp_path / "u.txt", [(0, [1, 0])])
    with pytest.raises(ValueError, match="missing embeddings for ids"):
        read_embedding_file(p, ids=["0", "7"])


def test_dimension_mismatch(tmp_path):
    u = write_text(tmp_path / "u.txt", [(0, [1, 0, 0, 1])])
    i = write_text(tmp_path / "i.txt", [(0, [1, 0, 0, 1, 0])])
    with pytest.raises(ValueError, match="dimension"):
        ingest_llm_embeddings(u, i)


def test_zero_vector_rejected():
    with pytest.raises(ValueError):
        RawSemanticEmbeddings(np.zeros((1, 2)), np.ones((1, 2)))


@pytest.mark.parametrize("binary", [False, True])
def test_embedding_file_round_trip(tmp_path, binary):
    m = np.random.default_rng(0).normal(size=(3, 5))
    write_embedding_file(tmp_path / "e", m, binary=binary)
    back = read_embedding_file(tmp_path / "e")
    assert np.allclose(back, m, atol=1e-6 if binary else 0)


def test_raw_similarity_examples():
    raw = RawSemanticEmbeddings(np.array([[1.0, 0.0], [2.0, 1.0]]), np.array([[1.0, 1.0], [-2.0, -1.0], [1.0, 0.0]]))
    assert raw_similarity(raw, 0, 2) == pytest.approx(1.0)
    assert raw_similarity(raw, 1, 1) == pytest.approx(-1.0)
    assert raw_similarity(raw, 0, 0) == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    assert raw_similarity(raw, 0, 0) == pytest.approx(0.70711, abs=1e-5)
    m = raw_similarity_matrix(raw)
    assert m[1, 0] == pytest.approx(raw_similarity(raw, 1, 0), abs=1e-12)


def test_top_n_tie_breaks_by_id():
    assert list(top_n_items(np.array([0.5, 0.9, 0.5, 0.9]), 3)) == [1, 3, 0]


def test_labels_are_intersection():
    # user 0 positives {1, 2}; raw top-2 is {2, 3}
    raw = RawSemanticEmbeddings(np.array([[1.0, 0.0], [0.0, 1.0]]),
                                np.array([[-1.0, 0.0], [0.0, 1.0], [1.0, 0.1], [1.0, 0.0]]))
    ds = from_pairs([(0, 1), (0, 2), (1, 0)], 2, 4)
    labels = build_alignment_labels(raw, ds, n=2)
    assert list(labels[0]) == [2]
    assert 1 not in labels  # user 1's only positive, item 0, is outside its top 2


def test_label_soundness_exhaustive(corpus, split_corpus):
    n = 20
    labels = build_alignment_labels(corpus.raw, split_corpus, n)
    sim = raw_similarity_matrix(corpus.raw)
    train = split_corpus.pair_set()
    for u, items in labels.items():
        ranks = np.empty(corpus.dataset.num_items, dtype=int)
        ranks[top_n_items(sim[u], sim.shape[1])] = np.arange(1, sim.shape[1] + 1)
        for i in items:
            assert (u, int(i)) in train and ranks[i] <= n


def test_alignment_equal_logits_is_log_n_plus_one():
    # constant input gives identical projections for every id
    raw = RawSemanticEmbeddings(np.ones((3, 4)), np.ones((6, 4)))
    proj = Projector.init(4, 5, 8, seed=0)
    negatives = np.array([[1, 2, 3, 4], [0, 2, 3, 5]])
    loss, _ = alignment_loss(proj, raw, np.array([0, 1]), np.array([0, 1]), negatives, 0.5)
    assert loss == pytest.approx(math.log(5), abs=1e-12)


def test_alignment_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    raw = RawSemanticEmbeddings(rng.normal(size=(4, 6)), rng.normal(size=(7, 6)))
    proj = Projector.init(6, 3, 5, seed=1)
    proj.b1[:] = rng.normal(size=5) * 0.1
    users, pos = np.array([0, 1, 3, 0]), np.array([2, 4, 6, 1])
    negs = rng.integers(0, 7, size=(4, 5))
    _, grads = alignment_loss(proj, raw, users, pos, negs, 0.5)
    for name, value in proj.params.items():
        num = central_difference(lambda: alignment_loss(proj, raw, users, pos, negs, 0.5)[0], value)
        assert rel_error(grads[name], num) <= 1e-4, name


def test_project_unit_norm_and_dim(corpus):
    proj = Projector.init(corpus.raw.dim, 64, 16, seed=0)
    out = project(proj, corpus.raw)
    assert out.user.shape[1] == 64 and out.item.shape[1] == 64
    assert np.abs(np.linalg.norm(out.user, axis=1) - 1).max() <= 1e-6
    assert np.abs(np.linalg.norm(out.item, axis=1) - 1).max() <= 1e-6


def test_train_projector_deterministic_and_errors(corpus, split_corpus):
    labels = build_alignment_labels(corpus.raw, split_corpus, 50)
    cfg = ProjectorConfig(d_rec=8, hidden=16, epochs=2, batch_size=256, seed=3)
    a = train_projector(corpus.raw, labels, split_corpus, cfg)
    b = train_projector(corpus.raw, labels, split_corpus, cfg)
    assert np.array_equal(a.w1, b.w1) and a.history == b.history
    with pytest.raises(ValueError, match="empty"):
        train_projector(corpus.raw, {}, split_corpus, cfg)


def test_planted_pairs_have_higher_raw_cosine(corpus):
    sim = raw_similarity_matrix(corpus.raw)
    rel = np.zeros_like(sim, dtype=bool)
    for u, i in corpus.relevant:
        rel[u, i] = True
    assert sim[rel].mean() > sim[~rel].mean() + 3 * sim[~rel].std() / math.sqrt(rel.sum())


def test_projector_save_load(tmp_path):
    p = Projector.init(4, 3, 5, seed=0)
    p.save(tmp_path / "p.npz")
    q = Projector.load(tmp_path / "p.npz")
    assert all(np.array_equal(p.params[k], q.params[k]) for k in p.params)
