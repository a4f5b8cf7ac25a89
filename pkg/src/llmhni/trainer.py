"""Training loop, configuration, checkpoints and the staged LLMHNI pipeline.

Stages run in a fixed order: pretrain (plain BPR) -> projector alignment ->
candidate selection -> relevance rating -> graph edit -> main training.
``mode = plain_bpr`` skips everything between pretrain and main and trains the
control model on the original graph with uniform negatives.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .backbone import EmbeddingTable, Representations, init_embeddings, propagate, propagate_backward
from .data import TRAIN, VALID, InteractionDataset, ProfileStore
from .evaluation import MetricsReport, evaluate
from .graph import InteractionGraph, apply_relevance_edits, build_graph, edge_drop, normalize
from .losses import LossBreakdown, cross_graph_loss, hallucination_loss, total_loss
from .negatives import HardNegativePools, mined_bpr_loss
from .optim import AdamState, adam_step
from .oracle import (CandidatePair, OracleProvider, RelevanceVerdict, VerdictCache, build_candidates, classify,
                     rate_candidates)
from .semantic import (ProjectedSemanticEmbeddings, Projector, ProjectorConfig, RawSemanticEmbeddings,
                       build_alignment_labels, project, train_projector)

log = logging.getLogger(__name__)

__all__ = ["TrainConfig", "Checkpoint", "Trainer", "Pipeline", "StageError", "TrainingDiverged", "adam_step",
           "pretrain", "train_main"]


def _opt(default, note: str = ""):
    return field(default=default, metadata={"note": note})


@dataclass(frozen=True)
class TrainConfig:
    d_rec: int = _opt(64, "embedding size 64")
    batch_size: int = _opt(1024, "batch size 1024")
    lr: float = _opt(1e-3, "learning rate 1e-3, Adam")
    epochs: int = _opt(200, "epoch budget; early stopping on valid Recall@20")
    patience: int = _opt(10, "early-stopping patience in epochs")
    layers: int = _opt(3, "propagation layers L; 0 gives matrix factorization")
    init_std: float = _opt(0.01, "std of the normal embedding init")
    M: int = _opt(30, "fresh uniform negatives per refresh, M=30")
    K: int = _opt(10, "hard-negative pool size, K=10")
    N: int = _opt(50, "top-N raw similarity for alignment labels, N=50")
    tau_al: float = _opt(0.5, "alignment InfoNCE temperature 0.5")
    al_negatives: int = _opt(50, "negatives per alignment pair (defaults to N)")
    al_epochs: int = _opt(50, "projector training epochs")
    al_hidden: int = _opt(256, "projector hidden width")
    al_lr: float = _opt(1e-3, "projector learning rate")
    tau_de: float = _opt(0.5, "cross-graph temperature; useful range 0.1-1.0")
    tau_hal: float = _opt(0.5, "edge-drop view temperature; useful range 0.1-1.0")
    lambda1: float = _opt(0.1, "weight of the cross-graph loss; useful range 0.1-1.0")
    lambda2: float = _opt(0.1, "weight of the edge-drop view loss; useful range 0.1-1.0")
    rho: float = _opt(0.1, "edge drop probability for augmented views")
    hal_negatives: int = _opt(0, "sampled negatives for the view loss; 0 means all nodes")
    n1: int = _opt(2, "high-score negatives per user sent to the oracle")
    n2: int = _opt(2, "low-score positives per user sent to the oracle")
    candidate_mode: str = _opt("deterministic", "deterministic (top/bottom) or stochastic candidate selection")
    K_item: int = _opt(5, "evidence items for item-based rating")
    refresh: str = _opt("pair", "pool refresh cadence: pair (every positive in a batch) or epoch")
    negative_sampler: str = _opt("semantic", "semantic (mined hard negatives) or uniform")
    drop_noisy_positives: bool = _opt(True, "exclude oracle-flagged noisy pairs from BPR positives")
    inference_graph: str = _opt("original", "graph used for scoring: original or edited")
    seed: int = _opt(0, "master seed")
    backbone: str = _opt("lightgcn", "lightgcn or mf")
    mode: str = _opt("llmhni", "plain_bpr (control) or llmhni")
    eval_every: int = _opt(1, "validation cadence in epochs")

    def __post_init__(self):
        if self.mode not in ("plain_bpr", "llmhni"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.backbone not in ("lightgcn", "mf"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.refresh not in ("pair", "epoch"):
            raise ValueError(f"unknown refresh cadence {self.refresh!r}")
        if self.negative_sampler not in ("semantic", "uniform"):
            raise ValueError(f"unknown negative sampler {self.negative_sampler!r}")
        if self.inference_graph not in ("original", "edited"):
            raise ValueError(f"unknown inference graph {self.inference_graph!r}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        for name in ("d_rec", "batch_size", "epochs", "K", "N", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("lr", "tau_al", "tau_de", "tau_hal", "al_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")

    @property
    def num_layers(self) -> int:
        return 0 if self.backbone == "mf" else self.layers

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def as_dict(self) -> Dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.as_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for k, v in self.as_dict().items():
                fh.write(f"{k} = {v}\n")

    @classmethod
    def coerce(cls, key: str, text: str):
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        if key not in types:
            raise KeyError(f"unknown config key {key!r}")
        kind = types[key]
        text = text.strip()
        if kind == "bool":
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"{key}: not a boolean: {text!r}")
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        return text

    @classmethod
    def load(cls, path, **overrides) -> "TrainConfig":
        values = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected 'key = value'")
                key, value = (s.strip() for s in line.split("=", 1))
                try:
                    values[key] = cls.coerce(key, value)
                except (KeyError, ValueError) as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from None
        values.update(overrides)
        return cls(**values)


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str = ""):
        super().__init__(message or f"missing upstream stage artifact: {stage}")
        self.stage = stage


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class Checkpoint:
    """Everything needed to resume training exactly or to score with the best table."""

    table: EmbeddingTable
    best_table: EmbeddingTable
    adam: AdamState
    epoch: int
    config_hash: str
    stage: str
    best_metric: float = -1.0
    best_epoch: int = -1
    bad_epochs: int = 0
    history: List[Dict] = field(default_factory=list)
    pools: Optional[List[Optional[np.ndarray]]] = None

    def save(self, path) -> None:
        arrays = {
            "table": self.table.stacked(), "best_table": self.best_table.stacked(),
            "adam_m": self.adam.m.get("emb", np.zeros(0)), "adam_v": self.adam.v.get("emb", np.zeros(0)),
        }
        meta = {
            "num_users": self.table.num_users, "adam_t": self.adam.t, "epoch": self.epoch,
            "config_hash": self.config_hash, "stage": self.stage, "best_metric": self.best_metric,
            "best_epoch": self.best_epoch, "bad_epochs": self.bad_epochs, "history": self.history,
            "pools": None if self.pools is None else [None if p is None else p.tolist() for p in self.pools],
        }
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp.npz")
        np.savez(tmp, **arrays)
        tmp.replace(path)

    @classmethod
    def load(cls, path, config_hash: Optional[str] = None) -> "Checkpoint":
        with np.load(path) as f:
            meta = json.loads(bytes(f["meta"]).decode("utf-8"))
            nu = meta["num_users"]
            adam = AdamState(t=meta["adam_t"])
            if f["adam_m"].size:
                adam.m["emb"] = f["adam_m"].copy()
                adam.v["emb"] = f["adam_v"].copy()
            ck = cls(
                EmbeddingTable.from_stacked(f["table"].copy(), nu),
                EmbeddingTable.from_stacked(f["best_table"].copy(), nu),
                adam, meta["epoch"], meta["config_hash"], meta["stage"], meta["best_metric"],
                meta["best_epoch"], meta["bad_epochs"], meta["history"],
                None if meta["pools"] is None else [None if p is None else np.array(p, np.int64) for p in meta["pools"]],
            )
        if config_hash is not None and ck.config_hash != config_hash:
            raise ValueError(f"{path}: checkpoint config hash {ck.config_hash} does not match {config_hash}")
        return ck


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


# stream ids mixed into per-batch seeds
_S_ORDER, _S_NEG, _S_AUG_G, _S_AUG_GP, _S_HAL, _S_PROBE = range(6)


class Trainer:
    """Adam on the stacked user+item table for one stage.

    ``mode = plain_bpr`` trains BPR with uniform negatives on ``graph``. In
    ``llmhni`` mode each batch combines the mined-negative BPR loss, the
    cross-graph loss between ``graph`` and ``edited`` and the edge-drop view
    loss, weighted by ``lambda1`` and ``lambda2``.
    """

    def __init__(self, cfg: TrainConfig, data: InteractionDataset, graph: Optional[InteractionGraph] = None,
                 edited: Optional[InteractionGraph] = None, projected: Optional[ProjectedSemanticEmbeddings] = None,
                 hard: Set[Tuple[int, int]] = frozenset(), noisy: Set[Tuple[int, int]] = frozenset(),
                 stage: str = "main", dtype=np.float32):
        self.cfg = cfg
        self.data = data
        self.stage = stage
        self.graph = graph if graph is not None else build_graph(data)
        self.adj = normalize(self.graph, dtype)
        self.dtype = dtype
        nu, ni = data.num_users, data.num_items
        llmhni = cfg.mode == "llmhni"
        if llmhni:
            if cfg.negative_sampler == "semantic" and projected is None:
                raise StageError("projector")
            if edited is None:
                raise StageError("edit-graph")
        self.edited = edited if llmhni else None
        self.adj_edited = normalize(edited, dtype) if llmhni else None
        self.projected = projected if llmhni else None
        self.noisy = set(noisy) if llmhni else set()
        self.hard = set(hard) if llmhni else set()

        pairs = data.pairs(TRAIN)
        if llmhni and cfg.drop_noisy_positives and self.noisy:
            keep = np.array([(int(u), int(i)) not in self.noisy for u, i in pairs], dtype=bool)
            pairs = pairs[keep]
        self.train_pairs = pairs
        excluded = [list(p) for p in data.positives_by_user(TRAIN)]
        for u, i in self.hard:
            excluded[u].append(i)
        self.pools = HardNegativePools([np.array(e, dtype=np.int64) for e in excluded], ni, cfg.K, cfg.M)

        emb = init_embeddings(nu, ni, cfg.d_rec, cfg.seed, cfg.init_std, dtype).stacked()
        self.params = {"emb": emb}
        self.checkpoint = Checkpoint(
            EmbeddingTable.from_stacked(emb, nu), EmbeddingTable.from_stacked(emb.copy(), nu),
            AdamState(), 0, cfg.hash(), stage,
        )
        if llmhni and cfg.negative_sampler == "semantic":
            self.pools.init_all(cfg.seed)

    # -- state -------------------------------------------------------------
    @property
    def table(self) -> EmbeddingTable:
        return EmbeddingTable.from_stacked(self.params["emb"], self.data.num_users)

    def resume(self, ck: Checkpoint) -> None:
        if ck.config_hash != self.cfg.hash():
            raise ValueError("checkpoint was written with a different config")
        self.params["emb"] = ck.table.stacked().astype(self.dtype).copy()
        ck.table = self.table
        if ck.pools is not None:
            self.pools.pools = [None if p is None else p.copy() for p in ck.pools]
        self.checkpoint = ck

    def representations(self, table: Optional[EmbeddingTable] = None) -> Representations:
        table = self.table if table is None else table
        adj = self.adj_edited if (self.cfg.inference_graph == "edited" and self.adj_edited is not None) else self.adj
        return propagate(table, adj, self.cfg.num_layers)

    # -- one optimization step ---------------------------------------------
    def _negatives(self, batch: np.ndarray, rep: Representations, epoch: int, b: int) -> np.ndarray:
        rng = _rng(self.cfg.seed, epoch, b, _S_NEG)
        if self.cfg.mode == "plain_bpr" or self.cfg.negative_sampler == "uniform":
            return np.array([self.pools.uniform(int(u), 1, rng)[0] for u in batch[:, 0]], dtype=np.int64)
        users = np.unique(batch[:, 0])
        scores = dict(zip(users.tolist(), rep.user[users] @ rep.item.T))
        negs = np.empty(len(batch), dtype=np.int64)
        for row, u in enumerate(batch[:, 0].tolist()):
            if self.cfg.refresh == "pair":
                self.pools.refresh(u, scores[u], rng)
            negs[row] = self.pools.select(u, self.projected)
        return negs

    def loss_and_grad(self, batch: np.ndarray, epoch: int, b: int, negatives: Optional[np.ndarray] = None):
        """Loss breakdown, table gradient and the negatives used, for one batch."""
        cfg = self.cfg
        table = self.table
        L = cfg.num_layers
        rep = propagate(table, self.adj, L, "G")
        if negatives is None:
            negatives = self._negatives(batch, rep, epoch, b)
        l_rec, (gu, gi) = mined_bpr_loss(batch, rep, negatives)
        grad = np.concatenate(propagate_backward(gu, gi, self.adj, L))
        l_de = l_hal = 0.0
        if cfg.mode == "llmhni" and (cfg.lambda1 or cfg.lambda2):
            if cfg.lambda1:
                rep_p = propagate(table, self.adj_edited, L, "G'")
                l_de, (g1u, g1i), (g2u, g2i) = cross_graph_loss(rep, rep_p, batch, cfg.tau_de)
                grad += cfg.lambda1 * np.concatenate(propagate_backward(g1u, g1i, self.adj, L))
                grad += cfg.lambda1 * np.concatenate(propagate_backward(g2u, g2i, self.adj_edited, L))
            if cfg.lambda2:
                adj_1 = normalize(edge_drop(self.edited, cfg.rho, _rng(cfg.seed, epoch, b, _S_AUG_GP)), self.dtype)
                adj_2 = normalize(edge_drop(self.graph, cfg.rho, _rng(cfg.seed, epoch, b, _S_AUG_G)), self.dtype)
                rep_1 = propagate(table, adj_1, L, "G'_aug")
                rep_2 = propagate(table, adj_2, L, "G_aug")
                l_hal, (h1u, h1i), (h2u, h2i) = hallucination_loss(
                    rep_1, rep_2, cfg.tau_hal, users=batch[:, 0], items=batch[:, 1],
                    num_negatives=cfg.hal_negatives or None, rng=_rng(cfg.seed, epoch, b, _S_HAL))
                grad += cfg.lambda2 * np.concatenate(propagate_backward(h1u, h1i, adj_1, L))
                grad += cfg.lambda2 * np.concatenate(propagate_backward(h2u, h2i, adj_2, L))
        parts = total_loss(l_rec, l_de, l_hal, cfg.lambda1 if cfg.mode == "llmhni" else 0.0,
                           cfg.lambda2 if cfg.mode == "llmhni" else 0.0)
        return parts, grad.astype(self.dtype, copy=False), negatives, rep

    def batches(self, epoch: int) -> List[np.ndarray]:
        order = _rng(self.cfg.seed, epoch, 0, _S_ORDER).permutation(len(self.train_pairs))
        bs = self.cfg.batch_size
        return [self.train_pairs[order[s:s + bs]] for s in range(0, len(order), bs)]

    def step(self, batch: np.ndarray, epoch: int, b: int) -> Tuple[LossBreakdown, Dict[str, float]]:
        try:
            parts, grad, negatives, rep = self.loss_and_grad(batch, epoch, b)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"epoch {epoch} batch {b}: {exc}") from exc
        probe = _rng(self.cfg.seed, epoch, b, _S_PROBE)
        uniform = np.array([self.pools.uniform(int(u), 1, probe)[0] for u in batch[:, 0]], dtype=np.int64)
        us = batch[:, 0]
        stats = {
            "neg_score": float(np.mean(np.sum(rep.user[us] * rep.item[negatives], axis=1))),
            "uniform_score": float(np.mean(np.sum(rep.user[us] * rep.item[uniform], axis=1))),
        }
        adam_step(self.params, {"emb": grad}, self.checkpoint.adam, lr=self.cfg.lr)
        return parts, stats

    # -- epochs ------------------------------------------------------------
    def run_epoch(self, epoch: int) -> Dict:
        cfg = self.cfg
        if cfg.mode == "llmhni" and cfg.negative_sampler == "semantic" and cfg.refresh == "epoch":
            rep = propagate(self.table, self.adj, cfg.num_layers)
            rng = _rng(cfg.seed, epoch, 0, _S_NEG)
            for u in range(self.data.num_users):
                if self.pools.pools[u] is not None:
                    self.pools.refresh(u, rep.user[u] @ rep.item.T, rng)
        sums = np.zeros(4)
        probe = np.zeros(2)
        n = 0
        for b, batch in enumerate(self.batches(epoch)):
            parts, stats = self.step(batch, epoch, b)
            w = len(batch)
            sums += w * np.array([parts.l_rec, parts.l_de, parts.l_hal, parts.l_total])
            probe += w * np.array([stats["neg_score"], stats["uniform_score"]])
            n += w
        sums /= max(n, 1)
        probe /= max(n, 1)
        return {"epoch": epoch, "l_rec": sums[0], "l_de": sums[1], "l_hal": sums[2], "l_total": sums[3],
                "neg_score": probe[0], "uniform_score": probe[1]}

    def validate(self, table: Optional[EmbeddingTable] = None) -> float:
        return evaluate(self.representations(table), self.data, ks=(20,), split=VALID).recall(20)

    def fit(self, epochs: Optional[int] = None, checkpoint_path=None, log_path=None) -> Checkpoint:
        """Train until the epoch budget or early stopping; returns the checkpoint."""
        cfg = self.cfg
        budget = cfg.epochs if epochs is None else epochs
        ck = self.checkpoint
        has_valid = bool(self.data.mask(VALID).any())
        while ck.epoch < budget and ck.bad_epochs < cfg.patience:
            epoch = ck.epoch
            row = self.run_epoch(epoch)
            if not math.isfinite(row["l_total"]):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}: {row}")
            ck.epoch = epoch + 1
            if has_valid and (ck.epoch % cfg.eval_every == 0 or ck.epoch == budget):
                metric = self.validate()
                row["valid_recall@20"] = metric
                if metric > ck.best_metric:
                    ck.best_metric, ck.best_epoch, ck.bad_epochs = metric, ck.epoch, 0
                    ck.best_table = self.table.copy()
                else:
                    ck.bad_epochs += 1
            elif not has_valid:
                ck.best_table, ck.best_epoch = self.table.copy(), ck.epoch
            ck.history.append({k: float(v) for k, v in row.items()})
            log.debug("epoch %d %s", epoch, row)
            ck.table = self.table
            ck.pools = [None if p is None else p.copy() for p in self.pools.pools]
            if checkpoint_path is not None:
                ck.save(checkpoint_path)
            if log_path is not None:
                write_training_log(ck.history, log_path)
        return ck


def write_training_log(history: Sequence[Dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "l_rec", "l_de", "l_hal", "l_total"])
        for row in history:
            w.writerow([int(row["epoch"])] + [repr(float(row[k])) for k in ("l_rec", "l_de", "l_hal", "l_total")])


def pretrain(cfg: TrainConfig, data: InteractionDataset, **fit_kw) -> Checkpoint:
    """Plain-BPR recommender used to pick oracle candidates."""
    trainer = Trainer(cfg.replace(mode="plain_bpr"), data, stage="pretrain")
    return trainer.fit(**fit_kw)


def train_main(cfg: TrainConfig, data: InteractionDataset, graph: Optional[InteractionGraph] = None,
               edited: Optional[InteractionGraph] = None, projected: Optional[ProjectedSemanticEmbeddings] = None,
               hard=frozenset(), noisy=frozenset(), **fit_kw) -> Checkpoint:
    trainer = Trainer(cfg, data, graph, edited, projected, hard, noisy, stage="main")
    return trainer.fit(**fit_kw)


class Pipeline:
    """In-process staged run; each stage checks that its inputs exist.

    Stages: ``pretrain``, ``align``, ``candidates``, ``rate``, ``edit_graph``,
    ``train``. ``run_all`` runs whatever the mode needs and leaves the
    test-split ``MetricsReport`` in ``test_report``.
    """

    def __init__(self, cfg: TrainConfig, data: InteractionDataset, raw: Optional[RawSemanticEmbeddings] = None,
                 provider: Optional[OracleProvider] = None, profiles: Optional[ProfileStore] = None,
                 cache: Optional[VerdictCache] = None):
        self.cfg = cfg
        self.data = data
        self.raw = raw
        self.provider = provider
        self.profiles = profiles
        self.cache = cache
        self.graph = build_graph(data)
        self.pretrained: Optional[Checkpoint] = None
        self.projector: Optional[Projector] = None
        self.projected: Optional[ProjectedSemanticEmbeddings] = None
        self.labels = None
        self.pretrain_scores: Optional[np.ndarray] = None
        self.candidates: Optional[List[CandidatePair]] = None
        self.verdicts: Optional[List[RelevanceVerdict]] = None
        self.hard: Optional[Set[Tuple[int, int]]] = None
        self.noisy: Optional[Set[Tuple[int, int]]] = None
        self.edited: Optional[InteractionGraph] = None
        self.trainer: Optional[Trainer] = None
        self.main: Optional[Checkpoint] = None
        self.test_report: Optional[MetricsReport] = None

    def pretrain(self) -> Checkpoint:
        self.pretrained = pretrain(self.cfg, self.data)
        rep = propagate(self.pretrained.best_table, normalize(self.graph), self.cfg.num_layers)
        self.pretrain_scores = rep.user @ rep.item.T
        return self.pretrained

    def align(self) -> ProjectedSemanticEmbeddings:
        if self.raw is None:
            raise StageError("embeddings", "no raw semantic embeddings supplied")
        cfg = self.cfg
        self.labels = build_alignment_labels(self.raw, self.data, cfg.N)
        pcfg = ProjectorConfig(d_rec=cfg.d_rec, hidden=cfg.al_hidden, tau=cfg.tau_al, num_negatives=cfg.al_negatives,
                               epochs=cfg.al_epochs, batch_size=cfg.batch_size, lr=cfg.al_lr, seed=cfg.seed)
        self.projector = train_projector(self.raw, self.labels, self.data, pcfg)
        self.projected = project(self.projector, self.raw)
        return self.projected

    def build_candidates(self) -> List[CandidatePair]:
        if self.pretrain_scores is None:
            raise StageError("pretrain")
        self.candidates = build_candidates(self.pretrain_scores, self.data.positives_by_user(TRAIN),
                                           self.cfg.n1, self.cfg.n2, self.cfg.candidate_mode, self.cfg.seed)
        return self.candidates

    def rate(self) -> List[RelevanceVerdict]:
        if self.candidates is None:
            raise StageError("candidates")
        if self.provider is None:
            raise StageError("provider", "no relevance provider configured")
        self.verdicts = rate_candidates(self.provider, self.candidates, self.pretrain_scores,
                                        self.data.positives_by_user(TRAIN), self.profiles, self.cfg.K_item,
                                        self.cache)
        return self.verdicts

    def edit_graph(self) -> InteractionGraph:
        if self.verdicts is None:
            raise StageError("rate")
        self.hard, self.noisy = classify(self.verdicts, self.candidates)
        self.edited = apply_relevance_edits(self.graph, self.hard, self.noisy)
        return self.edited

    def train(self) -> Checkpoint:
        cfg = self.cfg
        if cfg.mode == "llmhni":
            if cfg.negative_sampler == "semantic" and self.projected is None:
                raise StageError("projector")
            if self.edited is None:
                raise StageError("edit-graph")
        self.trainer = Trainer(cfg, self.data, self.graph, self.edited, self.projected,
                               self.hard or set(), self.noisy or set())
        self.main = self.trainer.fit()
        self.test_report = evaluate(self.trainer.representations(self.main.best_table), self.data)
        return self.main

    def run_all(self) -> MetricsReport:
        if self.cfg.mode == "llmhni":
            self.pretrain()
            if self.cfg.negative_sampler == "semantic":
                self.align()
            self.build_candidates()
            self.rate()
            self.edit_graph()
        self.train()
        return self.test_report
