"""Interaction datasets: loading, stratified splitting, noise injection, profiles.

Interaction TSV lines are ``user_id<TAB>item_id[<TAB>label[<TAB>split[<TAB>injected]]]``;
``#`` lines are comments. Ids are remapped to dense 0-based indices on load.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

TRAIN, VALID, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "valid", "test")
_SPLIT_CODES = {name: code for code, name in enumerate(SPLIT_NAMES)}


class ParseError(ValueError):
    """Malformed input file; message names the offending line."""


class DataWarning(UserWarning):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class InteractionDataset:
    """Labeled (user, item, label) triples with a split tag per interaction.

    Arrays are read-only; every transformation returns a new dataset.
    """

    num_users: int
    num_items: int
    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    injected: np.ndarray
    user_ids: Tuple[str, ...] = ()
    item_ids: Tuple[str, ...] = ()

    def __post_init__(self):
        n = len(self.users)
        for name in ("items", "labels", "splits", "injected"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name!r} has length {len(getattr(self, name))}, expected {n}")
        object.__setattr__(self, "users", _frozen(np.asarray(self.users, dtype=np.int64)))
        object.__setattr__(self, "items", _frozen(np.asarray(self.items, dtype=np.int64)))
        object.__setattr__(self, "labels", _frozen(np.asarray(self.labels, dtype=np.int8)))
        object.__setattr__(self, "splits", _frozen(np.asarray(self.splits, dtype=np.int8)))
        object.__setattr__(self, "injected", _frozen(np.asarray(self.injected, dtype=bool)))
        if n:
            if self.users.min() < 0 or self.users.max() >= self.num_users:
                raise ValueError("user id out of range")
            if self.items.min() < 0 or self.items.max() >= self.num_items:
                raise ValueError("item id out of range")
            if not np.isin(self.labels, (0, 1)).all():
                raise ValueError("labels must be 0 or 1")
        if not self.user_ids:
            object.__setattr__(self, "user_ids", tuple(str(u) for u in range(self.num_users)))
        if not self.item_ids:
            object.__setattr__(self, "item_ids", tuple(str(i) for i in range(self.num_items)))

    def __len__(self) -> int:
        return len(self.users)

    def mask(self, split: Optional[int] = None, positives: bool = True) -> np.ndarray:
        m = np.ones(len(self), dtype=bool)
        if positives:
            m &= self.labels == 1
        if split is not None:
            m &= self.splits == split
        return m

    def pairs(self, split: Optional[int] = TRAIN) -> np.ndarray:
        """Positive (user, item) pairs of ``split`` as an (n, 2) array; ``None`` for all splits."""
        m = self.mask(split)
        return np.stack([self.users[m], self.items[m]], axis=1)

    def pair_set(self, split: Optional[int] = TRAIN) -> set:
        return {(int(u), int(i)) for u, i in self.pairs(split)}

    def matrix(self, split: Optional[int] = TRAIN) -> sp.csr_matrix:
        """Binary user x item CSR matrix of positives in ``split``."""
        p = self.pairs(split)
        data = np.ones(len(p), dtype=np.float64)
        m = sp.csr_matrix((data, (p[:, 0], p[:, 1])), shape=(self.num_users, self.num_items))
        m.sum_duplicates()
        m.data[:] = 1.0
        return m

    def positives_by_user(self, split: Optional[int] = TRAIN) -> List[np.ndarray]:
        m = self.matrix(split)
        return [np.sort(m.indices[m.indptr[u]:m.indptr[u + 1]]) for u in range(self.num_users)]

    def replace(self, **columns) -> "InteractionDataset":
        fields = dict(
            num_users=self.num_users, num_items=self.num_items, users=self.users, items=self.items,
            labels=self.labels, splits=self.splits, injected=self.injected,
            user_ids=self.user_ids, item_ids=self.item_ids,
        )
        fields.update(columns)
        return InteractionDataset(**fields)


def from_pairs(pairs: Iterable[Tuple[int, int]], num_users: Optional[int] = None,
               num_items: Optional[int] = None, splits: Optional[Sequence[int]] = None) -> InteractionDataset:
    """Dataset of positives from dense-id pairs (no remapping)."""
    p = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
    nu = int(p[:, 0].max()) + 1 if num_users is None else num_users
    ni = int(p[:, 1].max()) + 1 if num_items is None else num_items
    n = len(p)
    s = np.zeros(n, dtype=np.int8) if splits is None else np.asarray(splits, dtype=np.int8)
    return InteractionDataset(nu, ni, p[:, 0], p[:, 1], np.ones(n, np.int8), s, np.zeros(n, bool))


def _sort_key(token: str):
    return (0, int(token), "") if token.lstrip("-").isdigit() else (1, 0, token)


def _read_records(path: Path, format: str):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if format == "tsv":
                cols = line.split("\t")
                if len(cols) < 2 or len(cols) > 5 or not cols[0] or not cols[1]:
                    raise ParseError(f"{path}:{lineno}: expected 2-5 tab-separated columns, got {line!r}")
                rec = {"user": cols[0], "item": cols[1]}
                if len(cols) > 2:
                    rec["label"] = cols[2]
                if len(cols) > 3:
                    rec["split"] = cols[3]
                if len(cols) > 4:
                    rec["injected"] = cols[4]
            elif format == "jsonl":
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
                if not isinstance(obj, dict) or "user" not in obj or "item" not in obj:
                    raise ParseError(f"{path}:{lineno}: object needs 'user' and 'item' keys")
                rec = {k: obj[k] for k in ("user", "item", "label", "split", "injected") if k in obj}
            else:
                raise ValueError(f"unknown format {format!r}")
            try:
                label = int(rec.get("label", 1))
                if label not in (0, 1):
                    raise ValueError
                split = _SPLIT_CODES[str(rec.get("split", "train"))]
                injected = int(rec.get("injected", 0))
                if injected not in (0, 1):
                    raise ValueError
            except (KeyError, ValueError, TypeError):
                raise ParseError(f"{path}:{lineno}: bad label/split/injected field in {line!r}") from None
            records.append((str(rec["user"]), str(rec["item"]), label, split, bool(injected)))
    return records


def load_dataset(path, format: str = "tsv", remap_out=None,
                 sizes: Optional[Tuple[int, int]] = None) -> InteractionDataset:
    """Read interactions, remap ids densely and drop duplicate pairs.

    If ``remap_out`` is given the id-remap table is written there as TSV
    ``kind<TAB>original<TAB>dense``. With ``sizes = (num_users, num_items)``
    the ids are taken as already dense and kept as they are, so users or
    items without interactions do not shift the numbering.
    """
    path = Path(path)
    records = _read_records(path, format)
    if not records:
        raise ValueError(f"{path}: no interactions")
    if sizes is not None:
        user_ids = [str(k) for k in range(sizes[0])]
        item_ids = [str(k) for k in range(sizes[1])]
        known_u, known_i = set(user_ids), set(item_ids)
        for u, i, *_ in records:
            if u not in known_u or i not in known_i:
                raise ParseError(f"{path}: pair ({u}, {i}) outside dense range {sizes}")
    else:
        user_ids = sorted({r[0] for r in records}, key=_sort_key)
        item_ids = sorted({r[1] for r in records}, key=_sort_key)
    umap = {u: k for k, u in enumerate(user_ids)}
    imap = {i: k for k, i in enumerate(item_ids)}

    seen = {}
    rows = []
    duplicates = 0
    for u, i, label, split, injected in records:
        key = (umap[u], imap[i])
        if key in seen:
            duplicates += 1
            continue
        seen[key] = len(rows)
        rows.append((key[0], key[1], label, split, injected))
    if duplicates:
        warnings.warn(f"{path}: dropped {duplicates} duplicate interaction(s)", DataWarning, stacklevel=2)
    cols = list(zip(*rows))
    ds = InteractionDataset(
        num_users=len(user_ids), num_items=len(item_ids),
        users=np.array(cols[0]), items=np.array(cols[1]), labels=np.array(cols[2]),
        splits=np.array(cols[3]), injected=np.array(cols[4]),
        user_ids=tuple(user_ids), item_ids=tuple(item_ids),
    )
    if remap_out is not None:
        save_remap(ds, remap_out)
    return ds


def save_remap(ds: InteractionDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for kind, ids in (("user", ds.user_ids), ("item", ds.item_ids)):
            for dense, original in enumerate(ids):
                fh.write(f"{kind}\t{original}\t{dense}\n")


def save_dataset(ds: InteractionDataset, path, with_split: bool = True) -> None:
    """Write dense ids as TSV, with split and injected columns by default."""
    with open(path, "w", encoding="utf-8") as fh:
        for u, i, y, s, inj in zip(ds.users, ds.items, ds.labels, ds.splits, ds.injected):
            if with_split:
                fh.write(f"{u}\t{i}\t{y}\t{SPLIT_NAMES[s]}\t{int(inj)}\n")
            else:
                fh.write(f"{u}\t{i}\t{y}\n")


def _split_counts(n: int, ratios: Tuple[float, float, float]) -> Tuple[int, int, int]:
    n_valid = max(1, math.floor(n * ratios[1] + 0.5))
    n_test = max(1, math.floor(n * ratios[2] + 0.5))
    while n - n_valid - n_test < 1:
        if n_valid >= n_test:
            n_valid -= 1
        else:
            n_test -= 1
    return n - n_valid - n_test, n_valid, n_test


def split_dataset(ds: InteractionDataset, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> InteractionDataset:
    """Per-user stratified split of positives into train/valid/test.

    Users with fewer than 3 positives keep everything in train. Non-positive
    rows stay in train.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    splits = np.full(len(ds), TRAIN, dtype=np.int8)
    pos = np.flatnonzero(ds.labels == 1)
    order = pos[np.lexsort((ds.items[pos], ds.users[pos]))]
    bounds = np.flatnonzero(np.diff(ds.users[order])) + 1
    small = 0
    for group in np.split(order, bounds):
        if len(group) < 3:
            small += 1
            continue
        group = rng.permutation(group)
        n_train, n_valid, _ = _split_counts(len(group), ratios)
        splits[group[n_train:n_train + n_valid]] = VALID
        splits[group[n_train + n_valid:]] = TEST
    if small:
        warnings.warn(f"{small} user(s) with fewer than 3 positives kept entirely in train",
                      DataWarning, stacklevel=2)
    return ds.replace(splits=splits)


@dataclass(frozen=True)
class NoiseSpec:
    ratio: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"noise ratio must lie in [0, 1], got {self.ratio}")


def inject_noise(ds: InteractionDataset, spec: NoiseSpec) -> InteractionDataset:
    """Add floor(ratio * |train positives|) fake train positives flagged ``injected``.

    Injected pairs are drawn uniformly from pairs absent from every split.
    """
    n_train = int(ds.mask(TRAIN).sum())
    n_new = math.floor(spec.ratio * n_train)
    if n_new == 0:
        return ds
    occupied = np.unique(ds.users * ds.num_items + ds.items)
    total = ds.num_users * ds.num_items
    if total - len(occupied) < n_new:
        raise ValueError(f"cannot inject {n_new} pairs: only {total - len(occupied)} non-interacted pairs")
    rng = np.random.default_rng(spec.seed)
    if total <= 50_000_000:
        free = np.setdiff1d(np.arange(total, dtype=np.int64), occupied, assume_unique=True)
        chosen = np.sort(rng.choice(free, size=n_new, replace=False))
    else:
        taken = set(occupied.tolist())
        picked: List[int] = []
        while len(picked) < n_new:
            for k in rng.integers(0, total, size=2 * (n_new - len(picked))).tolist():
                if k not in taken:
                    taken.add(k)
                    picked.append(k)
                    if len(picked) == n_new:
                        break
        chosen = np.sort(np.array(picked, dtype=np.int64))
    return ds.replace(
        users=np.concatenate([ds.users, chosen // ds.num_items]),
        items=np.concatenate([ds.items, chosen % ds.num_items]),
        labels=np.concatenate([ds.labels, np.ones(n_new, np.int8)]),
        splits=np.concatenate([ds.splits, np.full(n_new, TRAIN, np.int8)]),
        injected=np.concatenate([ds.injected, np.ones(n_new, bool)]),
    )


@dataclass
class ProfileStore:
    user_profiles: Dict[int, str] = field(default_factory=dict)
    item_profiles: Dict[int, str] = field(default_factory=dict)

    def user(self, u: int) -> str:
        try:
            return self.user_profiles[int(u)]
        except KeyError:
            raise KeyError(f"no profile for user {u}") from None

    def item(self, i: int) -> str:
        try:
            return self.item_profiles[int(i)]
        except KeyError:
            raise KeyError(f"no profile for item {i}") from None

    def missing(self, num_users: int, num_items: int) -> Dict[str, List[int]]:
        """Ids in ``range(num_users)`` / ``range(num_items)`` without a profile."""
        return {
            "user": sorted(set(range(num_users)) - self.user_profiles.keys()),
            "item": sorted(set(range(num_items)) - self.item_profiles.keys()),
        }


def load_profiles(path) -> ProfileStore:
    store = ProfileStore()
    dup = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                pid, kind, text = int(obj["id"]), obj["kind"], str(obj["text"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                raise ParseError(f"{path}:{lineno}: expected object with id, kind, text") from None
            if kind == "user":
                target = store.user_profiles
            elif kind == "item":
                target = store.item_profiles
            else:
                raise ParseError(f"{path}:{lineno}: unknown kind {kind!r}")
            if pid in target:
                dup += 1
            target[pid] = text
    if dup:
        warnings.warn(f"{path}: {dup} duplicate profile(s), last entry kept", DataWarning, stacklevel=2)
    return store


def save_profiles(store: ProfileStore, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for kind, table in (("user", store.user_profiles), ("item", store.item_profiles)):
            for pid in sorted(table):
                fh.write(json.dumps({"id": pid, "kind": kind, "text": table[pid]}) + "\n")
