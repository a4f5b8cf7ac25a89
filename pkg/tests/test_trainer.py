import numpy as np
import pytest

from llmhni.data import TRAIN, DataWarning, from_pairs, split_dataset
from llmhni.graph import apply_relevance_edits, build_graph
from llmhni.optim import AdamState, adam_step
from llmhni.oracle import MockProvider
from llmhni.semantic import ProjectedSemanticEmbeddings
from llmhni.trainer import Checkpoint, Pipeline, StageError, TrainConfig, Trainer, TrainingDiverged, pretrain

from conftest import central_difference, rel_error


def reference_adam(p, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(p.copy())
    return out


def test_adam_zero_gradient_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState())
    assert np.array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_is_lr():
    p = {"w": np.array([0.0])}
    adam_step(p, {"w": np.array([1.0])}, AdamState(), lr=1e-3)
    assert p["w"][0] == pytest.approx(-1e-3 / (1 + 1e-8), abs=1e-15)


def test_adam_matches_reference_over_100_steps():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(100, 6))
    start = rng.normal(size=6)
    ref = reference_adam(start.copy(), grads)
    p, state = {"w": start.copy()}, AdamState()
    for t, g in enumerate(grads):
        adam_step(p, {"w": g}, state)
        assert np.max(np.abs(p["w"] - ref[t])) <= 1e-10


def test_adam_rejects_bad_gradients():
    p = {"w": np.zeros(2)}
    with pytest.raises(ValueError):
        adam_step(p, {"w": np.zeros(3)}, AdamState())
    with pytest.raises(FloatingPointError):
        adam_step(p, {"w": np.array([np.nan, 0.0])}, AdamState())


# -- trainer fixtures ------------------------------------------------------

@pytest.fixture(scope="module")
def setup():
    """Split synthetic corpus, an edited graph and random projections."""
    from llmhni.synthetic import generate_corpus
    corpus = generate_corpus(num_users=40, num_items=30, seed=1)
    with pytest.warns(DataWarning, match="kept entirely in train"):
        ds = split_dataset(corpus.dataset, (0.6, 0.2, 0.2), seed=0)
    g = build_graph(ds)
    train = sorted(ds.pair_set(TRAIN))
    noisy = set(train[::7])
    hard = {(u, (i + 1) % ds.num_items) for u, i in train[::11]} - ds.pair_set(TRAIN)
    edited = apply_relevance_edits(g, hard, noisy)
    rng = np.random.default_rng(0)
    unit = lambda n: (lambda x: x / np.linalg.norm(x, axis=1, keepdims=True))(rng.normal(size=(n, 8)))  # noqa: E731
    projected = ProjectedSemanticEmbeddings(unit(ds.num_users), unit(ds.num_items))
    return ds, g, edited, projected, hard, noisy


CFG = TrainConfig(d_rec=8, batch_size=64, epochs=6, patience=100, init_std=0.1, seed=3)


def make(setup, cfg=CFG, dtype=np.float64):
    ds, g, edited, projected, hard, noisy = setup
    return Trainer(cfg, ds, g, edited, projected, hard, noisy, dtype=dtype)


def test_control_reduction_matches_plain_bpr(setup):
    ds = setup[0]
    ctl = CFG.replace(lambda1=0.0, lambda2=0.0, negative_sampler="uniform", drop_noisy_positives=False)
    a = make((ds, setup[1], setup[2], setup[3], set(), set()), ctl)
    b = Trainer(ctl.replace(mode="plain_bpr"), ds, dtype=np.float64)
    for epoch in range(2):
        for k, (ba, bb) in enumerate(zip(a.batches(epoch), b.batches(epoch))):
            pa, _ = a.step(ba, epoch, k)
            pb, _ = b.step(bb, epoch, k)
            assert abs(pa.l_total - pb.l_total) <= 1e-10
    assert np.max(np.abs(a.params["emb"] - b.params["emb"])) <= 1e-10


def test_full_gradient_matches_finite_differences():
    ds = from_pairs([(0, 0), (0, 2), (1, 1), (1, 3), (2, 0), (2, 4), (3, 2), (3, 4)], 4, 6)
    g = build_graph(ds)
    edited = apply_relevance_edits(g, {(0, 5)}, {(1, 3)})
    rng = np.random.default_rng(0)
    proj = ProjectedSemanticEmbeddings(*(x / np.linalg.norm(x, axis=1, keepdims=True)
                                         for x in (rng.normal(size=(4, 3)), rng.normal(size=(6, 3)))))
    cfg = TrainConfig(d_rec=3, layers=2, init_std=0.5, lambda1=0.3, lambda2=0.7, rho=0.3, K=3, M=2)
    t = Trainer(cfg, ds, g, edited, proj, {(0, 5)}, {(1, 3)}, dtype=np.float64)
    batch = t.train_pairs
    _, grad, negs, _ = t.loss_and_grad(batch, 0, 0)
    num = central_difference(lambda: t.loss_and_grad(batch, 0, 0, negs)[0].l_total, t.params["emb"])
    assert rel_error(grad, num) <= 1e-6


def test_gradient_linear_in_lambdas(setup):
    batch = make(setup).batches(0)[0]
    negs = make(setup).loss_and_grad(batch, 0, 0)[2]

    def grad(l1, l2):
        return make(setup, CFG.replace(lambda1=l1, lambda2=l2)).loss_and_grad(batch, 0, 0, negs)[1]

    g0 = grad(0.0, 0.0)
    assert np.max(np.abs((grad(0.4, 0.0) - g0) - 2 * (grad(0.2, 0.0) - g0))) <= 1e-10
    assert np.max(np.abs((grad(0.0, 0.6) - g0) - 3 * (grad(0.0, 0.2) - g0))) <= 1e-10


def test_single_step_descends_at_small_lr(setup):
    t = make(setup, CFG.replace(lr=1e-4))
    batch = t.batches(0)[0]
    before, grad, negs, _ = t.loss_and_grad(batch, 0, 0)
    adam_step(t.params, {"emb": grad}, AdamState(), lr=1e-4)
    after = t.loss_and_grad(batch, 0, 0, negs)[0]
    assert after.l_total < before.l_total


def test_resume_replays_bitwise(setup, tmp_path):
    full = make(setup, dtype=np.float32).fit(epochs=6)
    t = make(setup, dtype=np.float32)
    t.fit(epochs=3, checkpoint_path=tmp_path / "ck.npz")
    resumed = make(setup, dtype=np.float32)
    resumed.resume(Checkpoint.load(tmp_path / "ck.npz"))
    ck = resumed.fit(epochs=6)
    assert ck.history == full.history
    assert np.array_equal(ck.table.stacked(), full.table.stacked())


def test_resume_rejects_other_config(setup, tmp_path):
    make(setup).fit(epochs=1, checkpoint_path=tmp_path / "ck.npz")
    with pytest.raises(ValueError, match="different config"):
        make(setup, CFG.replace(lr=0.5)).resume(Checkpoint.load(tmp_path / "ck.npz"))


def test_same_seed_same_run(setup):
    a, b = make(setup).fit(epochs=3), make(setup).fit(epochs=3)
    assert a.history == b.history and a.best_metric == b.best_metric


def test_pretrain_loss_decreases(corpus, split_corpus):
    # six epoch means give five epoch-to-epoch steps over the first five epochs
    ck = pretrain(TrainConfig(epochs=6, patience=100), split_corpus)
    losses = [row["l_rec"] for row in ck.history]
    assert sum(b < a for a, b in zip(losses, losses[1:])) >= 4
    assert losses[-1] < losses[0]


def test_pretrain_deterministic_validation(split_corpus):
    cfg = TrainConfig(epochs=3, batch_size=256)
    assert pretrain(cfg, split_corpus).best_metric == pretrain(cfg, split_corpus).best_metric


def test_noisy_positives_dropped_and_hard_excluded(setup):
    ds, g, edited, projected, hard, noisy = setup
    t = make(setup)
    kept = {(int(u), int(i)) for u, i in t.train_pairs}
    assert not kept & noisy and len(kept) == len(ds.pair_set(TRAIN) - noisy)
    for u, i in hard:
        assert i in t.pools.excluded[u]


def test_stage_errors_name_missing_stage(setup):
    ds, g, edited, projected, _, _ = setup
    with pytest.raises(StageError) as err:
        Trainer(CFG, ds, g, edited, None)
    assert err.value.stage == "projector"
    with pytest.raises(StageError) as err:
        Trainer(CFG, ds, g, None, projected)
    assert err.value.stage == "edit-graph"
    pipe = Pipeline(CFG, ds, provider=MockProvider(set()))
    for stage, expected in ((pipe.build_candidates, "pretrain"), (pipe.rate, "candidates"),
                            (pipe.edit_graph, "rate"), (pipe.train, "projector"), (pipe.align, "embeddings")):
        with pytest.raises(StageError) as err:
            stage()
        assert err.value.stage == expected


def test_control_needs_no_oracle_or_projector(setup):
    pipe = Pipeline(CFG.replace(mode="plain_bpr", epochs=2), setup[0])
    report = pipe.run_all()
    assert pipe.projected is None and pipe.verdicts is None
    assert 0.0 <= report.recall(10) <= 1.0


def test_divergence_aborts(setup):
    t = make(setup, CFG.replace(lr=1e300, init_std=1e150))
    with np.errstate(all="ignore"), pytest.raises(TrainingDiverged):
        t.fit(epochs=3)


def test_config_dump_load_round_trip(tmp_path):
    cfg = TrainConfig(lr=3e-4, drop_noisy_positives=False, mode="plain_bpr", rho=0.25)
    cfg.dump(tmp_path / "c.cfg")
    assert TrainConfig.load(tmp_path / "c.cfg") == cfg
    assert TrainConfig.load(tmp_path / "c.cfg", lr=1e-2).lr == 1e-2
    (tmp_path / "bad.cfg").write_text("lr = 1e-3\nno_such_key = 4\n")
    with pytest.raises(ValueError, match="bad.cfg:2"):
        TrainConfig.load(tmp_path / "bad.cfg")
    with pytest.raises(ValueError):
        TrainConfig(mode="other")
    assert cfg.hash() != TrainConfig().hash() and cfg.hash() == TrainConfig.load(tmp_path / "c.cfg").hash()


def test_training_log_columns(setup, tmp_path):
    make(setup).fit(epochs=2, log_path=tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,l_rec,l_de,l_hal,l_total" and len(lines) == 3
    e, rec, de, hal, tot = (float(x) for x in lines[1].split(","))
    assert tot == pytest.approx(rec + CFG.lambda1 * de + CFG.lambda2 * hal, rel=1e-9)
