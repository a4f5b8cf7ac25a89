"""Full-catalog ranking metrics, Katz proximity, noise sweeps and easy/hard/noisy diagnostics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy import stats

from .backbone import Representations
from .data import TEST, TRAIN, InteractionDataset
from .graph import InteractionGraph
from .losses import log_sigmoid

DEFAULT_KS = (10, 20)
NOISE_GRID = (0.0, 0.05, 0.10, 0.15, 0.20)


def rank_items(scores: np.ndarray, exclude: Iterable[int] = ()) -> np.ndarray:
    """Item ids by descending score (ties: ascending id) with ``exclude`` removed."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    exclude = np.asarray(list(exclude) if not isinstance(exclude, np.ndarray) else exclude, dtype=np.int64)
    if len(exclude):
        order = order[~np.isin(order, exclude)]
    return order


def recall_at_k(ranking: Sequence, relevant: Iterable, k: int) -> float:
    """|top-k & relevant| / |relevant|; NaN when nothing is relevant."""
    relevant = set(relevant)
    if not relevant:
        return math.nan
    return sum(1 for x in list(ranking)[:k] if x in relevant) / len(relevant)


def ndcg_at_k(ranking: Sequence, relevant: Iterable, k: int) -> float:
    """Binary-relevance NDCG with 1/log2(rank + 1) gains; NaN when nothing is relevant."""
    relevant = set(relevant)
    if not relevant:
        return math.nan
    dcg = sum(1.0 / math.log2(r + 2) for r, x in enumerate(list(ranking)[:k]) if x in relevant)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(k, len(relevant))))
    return dcg / idcg


@dataclass
class MetricsReport:
    """Mean Recall@K / NDCG@K over users with at least one relevant item; per-user values kept."""

    users: np.ndarray
    recall_per_user: Dict[int, np.ndarray]
    ndcg_per_user: Dict[int, np.ndarray]

    @property
    def ks(self) -> Tuple[int, ...]:
        return tuple(sorted(self.recall_per_user))

    def recall(self, k: int) -> float:
        v = self.recall_per_user[k]
        return float(v.mean()) if len(v) else 0.0

    def ndcg(self, k: int) -> float:
        v = self.ndcg_per_user[k]
        return float(v.mean()) if len(v) else 0.0

    def as_dict(self) -> Dict[str, float]:
        out = {}
        for k in self.ks:
            out[f"recall@{k}"] = self.recall(k)
            out[f"ndcg@{k}"] = self.ndcg(k)
        return out

    def t_test(self, other: "MetricsReport", metric: str = "recall", k: int = 20):
        """Paired t-test over common users; returns ``scipy.stats`` result."""
        common, a_idx, b_idx = np.intersect1d(self.users, other.users, return_indices=True)
        a = getattr(self, f"{metric}_per_user")[k][a_idx]
        b = getattr(other, f"{metric}_per_user")[k][b_idx]
        return stats.ttest_rel(a, b)

    def table(self) -> str:
        head = " ".join(f"{name:>10}" for name in self.as_dict())
        vals = " ".join(f"{v:>10.4f}" for v in self.as_dict().values())
        return f"{head}\n{vals}"

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for name, v in self.as_dict().items():
                w.writerow([name, repr(v)])


def evaluate(rep: Representations, data: InteractionDataset, ks: Sequence[int] = DEFAULT_KS,
             split: int = TEST, mask_split: int = TRAIN) -> MetricsReport:
    """Rank the full catalog per user with ``mask_split`` positives removed."""
    ks = tuple(sorted(ks))
    relevant = data.positives_by_user(split)
    masked = data.positives_by_user(mask_split)
    users = np.array([u for u in range(data.num_users) if len(relevant[u])], dtype=np.int64)
    kmax = max(ks)
    discounts = 1.0 / np.log2(np.arange(kmax) + 2.0)
    recall = {k: np.zeros(len(users)) for k in ks}
    ndcg = {k: np.zeros(len(users)) for k in ks}
    block = 1024
    for start in range(0, len(users), block):
        ub = users[start:start + block]
        scores = (rep.user[ub] @ rep.item.T).astype(np.float64)
        for row, u in enumerate(ub):
            scores[row, masked[u]] = -np.inf
        # stable sort on negated scores gives ascending id among ties
        top = np.argsort(-scores, axis=1, kind="stable")[:, :kmax]
        for row, u in enumerate(ub):
            n_masked = len(masked[u])
            ranking = top[row][: max(0, min(kmax, data.num_items - n_masked))]
            hits = np.isin(ranking, relevant[u]).astype(np.float64)
            n_rel = len(relevant[u])
            for k in ks:
                h = hits[:k]
                recall[k][start + row] = h.sum() / n_rel
                idcg = discounts[:min(k, n_rel)].sum()
                ndcg[k][start + row] = (h * discounts[:len(h)]).sum() / idcg
    return MetricsReport(users, recall, ndcg)


def katz_index(g: InteractionGraph, u: int, i: int, beta: float = 0.5, l_max: int = 3) -> float:
    """sum_{l=1..l_max} beta^l (A^l)[u, i] on the bipartite adjacency."""
    if l_max < 1:
        raise ValueError("l_max must be >= 1")
    return float(katz_scores(g, np.array([[u, i]]), beta, l_max)[0])


def _adjacency(g: InteractionGraph) -> sp.csr_matrix:
    n = g.num_users + g.num_items
    u, i = g.users, g.num_users + g.items
    ones = np.ones(2 * len(u))
    return sp.csr_matrix((ones, (np.concatenate([u, i]), np.concatenate([i, u]))), shape=(n, n))


def katz_scores(g: InteractionGraph, pairs: np.ndarray, beta: float = 0.5, l_max: int = 3) -> np.ndarray:
    """Katz index for many (user, item) pairs at once."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        return np.zeros(0)
    a = _adjacency(g)
    users, inv = np.unique(pairs[:, 0], return_inverse=True)
    n = a.shape[0]
    x = sp.csr_matrix((np.ones(len(users)), (np.arange(len(users)), users)), shape=(len(users), n))
    acc = np.zeros(len(pairs))
    cols = g.num_users + pairs[:, 1]
    for level in range(1, l_max + 1):
        x = x @ a
        acc += beta ** level * np.asarray(x[inv, cols]).ravel()
    return acc


@dataclass
class RobustnessReport:
    """Per (mode, noise ratio) metrics and drop rates relative to ratio 0."""

    reports: Dict[Tuple[str, float], MetricsReport] = field(default_factory=dict)
    k: int = 10

    def drop_rate(self, mode: str, ratio: float, metric: str = "recall", k: Optional[int] = None) -> float:
        k = self.k if k is None else k
        base = getattr(self.reports[(mode, 0.0)], metric)(k)
        if base <= 0:
            raise ValueError(f"drop rate undefined: {metric}@{k} is 0 at ratio 0 for {mode}")
        return (base - getattr(self.reports[(mode, ratio)], metric)(k)) / base

    def rows(self) -> List[Dict[str, float]]:
        out = []
        for (mode, ratio), rep in sorted(self.reports.items()):
            row = {"mode": mode, "ratio": ratio, **rep.as_dict()}
            if (mode, 0.0) in self.reports:
                row["drop_rate"] = self.drop_rate(mode, ratio)
            out.append(row)
        return out

    def to_csv(self, path) -> None:
        rows = self.rows()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)

    def table(self) -> str:
        lines = [f"{'mode':<10} {'ratio':>6} {'R@10':>8} {'N@10':>8} {'R@20':>8} {'N@20':>8} {'drop':>8}"]
        for r in self.rows():
            lines.append(f"{r['mode']:<10} {r['ratio']:>6.2f} {r.get('recall@10', 0):>8.4f} {r.get('ndcg@10', 0):>8.4f} "
                         f"{r.get('recall@20', 0):>8.4f} {r.get('ndcg@20', 0):>8.4f} {r.get('drop_rate', 0):>8.4f}")
        return "\n".join(lines)


def noise_sweep(config, dataset: InteractionDataset, ratios: Sequence[float] = NOISE_GRID,
                modes: Sequence[str] = ("plain_bpr", "llmhni"), raw=None,
                provider_factory: Optional[Callable] = None, profiles=None, noise_seed: int = 0) -> RobustnessReport:
    """Train one model per (mode, ratio) on a split dataset with injected train noise.

    ``provider_factory(noisy_dataset)`` builds the relevance provider for the
    llmhni runs. The test split is identical across ratios.
    """
    from .data import NoiseSpec, inject_noise
    from .trainer import Pipeline

    report = RobustnessReport()
    ratios = sorted(set(float(r) for r in ratios) | {0.0})
    for ratio in ratios:
        noisy = inject_noise(dataset, NoiseSpec(ratio, noise_seed))
        for mode in modes:
            cfg = config.replace(mode=mode)
            provider = provider_factory(noisy) if (mode == "llmhni" and provider_factory) else None
            pipe = Pipeline(cfg, noisy, raw=raw, provider=provider, profiles=profiles)
            pipe.run_all()
            report.reports[(mode, ratio)] = pipe.test_report
    return report


def sample_diagnostics(rep: Representations, data: InteractionDataset, n_hard: int = 3, seed: int = 0,
                       beta: float = 0.5, l_max: int = 3, easy_quantile: float = 0.7,
                       hard_quantile: float = 0.3) -> List[Dict]:
    """Loss values and prediction scores for easy, hard and noisy samples.

    Loss rows (one per train positive): easy uses one uniform negative, hard
    the highest-scored of ``n_hard`` uniform negatives, noisy a test positive
    of the user as the negative. Score rows: train positives split by Katz
    index (top 30% easy, bottom 30% hard) and non-interacted pairs as noisy
    (flagged injected pairs when present, else uniform non-interactions).
    Pair sets of the three score categories are disjoint.
    """
    from .graph import build_graph

    rng = np.random.default_rng(seed)
    train = data.pairs(TRAIN)
    train_mask = data.mask(TRAIN)
    injected = data.injected & train_mask
    clean = train[~data.injected[train_mask]]
    positives = data.positives_by_user(None)
    test_pos = data.positives_by_user(TEST)
    rows: List[Dict] = []

    def score(u, i):
        return float(rep.user[u] @ rep.item[i])

    def bpr(u, i, j):
        return float(-log_sigmoid(np.float64(score(u, i) - score(u, j))))

    def neg_draws(u, size):
        mask = np.ones(data.num_items, dtype=bool)
        mask[positives[u]] = False
        free = np.flatnonzero(mask)
        return free[rng.integers(0, len(free), size)] if len(free) else np.zeros(0, np.int64)

    for u, i in clean:
        draws = neg_draws(u, 1 + n_hard)
        if len(draws) == 0:
            continue
        rows.append({"kind": "loss", "category": "easy", "user": int(u), "item": int(i), "value": bpr(u, i, draws[0])})
        hard_pool = draws[1:]
        j = int(hard_pool[np.argmax([score(u, x) for x in hard_pool])])
        rows.append({"kind": "loss", "category": "hard", "user": int(u), "item": int(i), "value": bpr(u, i, j)})
        if len(test_pos[u]):
            t = int(test_pos[u][rng.integers(0, len(test_pos[u]))])
            rows.append({"kind": "loss", "category": "noisy", "user": int(u), "item": int(i), "value": bpr(u, i, t)})

    g = build_graph(data)
    katz = katz_scores(g, clean, beta, l_max)
    if len(katz):
        hi, lo = np.quantile(katz, easy_quantile), np.quantile(katz, hard_quantile)
        for (u, i), k in zip(clean, katz):
            cat = "easy" if k > hi else ("hard" if k < lo else None)
            if cat:
                rows.append({"kind": "score", "category": cat, "user": int(u), "item": int(i), "value": score(u, i)})
    if injected.any():
        noisy_pairs = np.stack([data.users[injected], data.items[injected]], axis=1)
    else:
        noisy_pairs = np.array([(u, int(neg_draws(u, 1)[0])) for u in np.unique(clean[:, 0]) if len(neg_draws(u, 1))],
                               dtype=np.int64).reshape(-1, 2)
        noisy_pairs = np.unique(noisy_pairs, axis=0)
    for u, i in noisy_pairs:
        rows.append({"kind": "score", "category": "noisy", "user": int(u), "item": int(i), "value": score(u, i)})
    return rows


def save_diagnostics(rows: List[Dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["kind", "category", "user", "item", "value"])
        w.writeheader()
        w.writerows(rows)
