"""Logical-relevance oracle: candidate pairs, rating providers, hard/noisy classification.

A provider rates a (user, item) pair High, Mid or Low through one of two
channels: ``user`` (the user's own profile as evidence) and ``item`` (profiles
of the user's best-scored interacted items as evidence). Pairs rated High on
both channels are hard samples; every other candidate is noise.

Three providers ship: ``MockProvider`` answers from a hidden relevance set with
an optional flip rate, ``FileProvider`` replays a verdict file, and
``HttpProvider`` posts the rendered prompt to a JSON endpoint.
"""
from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
import urllib.error
import urllib.request
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from .data import DataWarning, ProfileStore
from .losses import sigmoid
from .negatives import weighted_sample_without_replacement

log = logging.getLogger(__name__)

RATINGS = ("High", "Mid", "Low")
CHANNELS = ("user", "item")
HIGH_SCORE_NEGATIVE = "high_score_negative"
LOW_SCORE_POSITIVE = "low_score_positive"


class ProviderError(RuntimeError):
    """Provider call failed; safe to retry."""


class UnparseableRating(ValueError):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


def normalize_rating(value) -> str:
    text = str(value).strip().lower()
    for r in RATINGS:
        if text == r.lower():
            return r
    raise UnparseableRating(f"not a rating: {value!r}", str(value))


_RATING_RE = re.compile(r"rating(.*?)\b(high|mid|low)\b", re.IGNORECASE | re.DOTALL)


def parse_rating_text(raw: str) -> str:
    """First High/Mid/Low after a ``rating`` marker, case-insensitive."""
    m = _RATING_RE.search(raw)
    if not m:
        raise UnparseableRating("no rating found in response", raw)
    return normalize_rating(m.group(2))


@dataclass(frozen=True)
class CandidatePair:
    user: int
    item: int
    channel: str
    pretrain_score: float


@dataclass(frozen=True)
class RelevanceVerdict:
    user: int
    item: int
    r_user: str
    r_item: str
    provider: str = ""


def load_template(channel: str) -> str:
    return resources.files("llmhni").joinpath("templates", f"{channel}.txt").read_text(encoding="utf-8")


def render(channel: str, variables: Dict[str, str]) -> str:
    return load_template(channel).format(**variables)


def build_candidates(pretrain_scores: np.ndarray, positives: Sequence[np.ndarray], n1: int = 2, n2: int = 2,
                     mode: str = "deterministic", seed: int = 0) -> List[CandidatePair]:
    """Per user: n1 high-scored non-interacted items and n2 low-scored interacted items.

    ``deterministic`` takes the top-n1 negatives and bottom-n2 positives (ties
    to the smaller id); ``stochastic`` samples without replacement with weights
    sigmoid(score) and sigmoid(-score).
    """
    if mode not in ("deterministic", "stochastic"):
        raise ValueError(f"unknown candidate mode {mode!r}")
    num_users, num_items = pretrain_scores.shape
    out: List[CandidatePair] = []
    short = 0
    for u in range(num_users):
        pos = np.asarray(positives[u], dtype=np.int64)
        mask = np.ones(num_items, dtype=bool)
        mask[pos] = False
        neg = np.flatnonzero(mask)
        s = pretrain_scores[u].astype(np.float64)
        if len(pos) < n2:
            short += 1
        if mode == "deterministic":
            top_neg = neg[np.lexsort((neg, -s[neg]))[:n1]]
            low_pos = pos[np.lexsort((pos, s[pos]))[:n2]]
        else:
            rng = np.random.default_rng([seed, u])
            top_neg = neg[weighted_sample_without_replacement(sigmoid(s[neg]), min(n1, len(neg)), rng)]
            low_pos = pos[weighted_sample_without_replacement(sigmoid(-s[pos]), min(n2, len(pos)), rng)]
        out.extend(CandidatePair(u, int(i), HIGH_SCORE_NEGATIVE, float(s[i])) for i in top_neg)
        out.extend(CandidatePair(u, int(i), LOW_SCORE_POSITIVE, float(s[i])) for i in low_pos)
    if short:
        warnings.warn(f"{short} user(s) have fewer than n2={n2} positives; all of them taken", DataWarning,
                      stacklevel=2)
    return out


def item_evidence(pretrain_scores_u: np.ndarray, positives_u: np.ndarray, k_item: int = 5) -> np.ndarray:
    """The user's interacted items with the top-``k_item`` pretrain scores."""
    pos = np.asarray(positives_u, dtype=np.int64)
    if len(pos) == 0:
        raise ValueError("item-based rating needs at least one interacted item")
    return pos[np.lexsort((pos, -pretrain_scores_u[pos]))[:k_item]]


class OracleProvider:
    """Base class. ``rate`` returns one of ``RATINGS``."""

    tag = "base"

    def rate(self, channel: str, user: int, item: int, variables: Dict[str, str]) -> str:
        raise NotImplementedError


class MockProvider(OracleProvider):
    """Answers from a hidden relevance set.

    Relevant pairs get High and others get ``nonrelevant_rating``; each
    (pair, channel) answer is flipped to the opposite class with probability
    ``flip_rate``, decided by a hash of (seed, user, item, channel).
    """

    tag = "mock"

    def __init__(self, relevant: Iterable[Tuple[int, int]], flip_rate: float = 0.0, seed: int = 0,
                 nonrelevant_rating: str = "Low"):
        if not 0.0 <= flip_rate <= 1.0:
            raise ValueError("flip rate must lie in [0, 1]")
        self.relevant: Set[Tuple[int, int]] = {(int(u), int(i)) for u, i in relevant}
        self.flip_rate = flip_rate
        self.seed = seed
        self.nonrelevant_rating = normalize_rating(nonrelevant_rating)
        if self.nonrelevant_rating == "High":
            raise ValueError("non-relevant rating cannot be High")
        self.calls = 0
        self._lock = threading.Lock()

    def flipped(self, channel: str, user: int, item: int) -> bool:
        if self.flip_rate == 0.0:
            return False
        rng = np.random.default_rng([self.seed, user, item, CHANNELS.index(channel)])
        return bool(rng.random() < self.flip_rate)

    def rate(self, channel, user, item, variables):
        with self._lock:
            self.calls += 1
        relevant = (int(user), int(item)) in self.relevant
        if self.flipped(channel, user, item):
            relevant = not relevant
        return "High" if relevant else self.nonrelevant_rating


class FileProvider(OracleProvider):
    """Replays ratings from a verdict JSONL file."""

    tag = "file"

    def __init__(self, path):
        self.records = {(v.user, v.item): v for v in load_verdicts(path)}
        self.calls = 0

    def rate(self, channel, user, item, variables):
        self.calls += 1
        try:
            v = self.records[(int(user), int(item))]
        except KeyError:
            raise ProviderError(f"no verdict recorded for pair ({user}, {item})") from None
        return v.r_user if channel == "user" else v.r_item


class HttpProvider(OracleProvider):
    """POSTs ``{"template_id", "variables"}``; expects ``{"rating", "raw"}`` back.

    When ``rating`` is absent or invalid, the rating is parsed out of ``raw``.
    """

    tag = "http"

    def __init__(self, endpoint: str, api_key_env: Optional[str] = None, auth_header: str = "Authorization",
                 timeout: float = 60.0, retries: int = 3, backoff: float = 1.0):
        self.endpoint = endpoint
        self.api_key_env = api_key_env
        self.auth_header = auth_header
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.calls = 0
        self._lock = threading.Lock()

    def _post(self, payload: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env)
            if key:
                headers[self.auth_header] = key
        req = urllib.request.Request(self.endpoint, data=json.dumps(payload).encode("utf-8"),
                                     headers=headers, method="POST")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))

    def rate(self, channel, user, item, variables):
        payload = {"template_id": channel, "variables": variables}
        last = None
        for attempt in range(self.retries):
            with self._lock:
                self.calls += 1
            try:
                body = self._post(payload)
                break
            except urllib.error.HTTPError as exc:
                if exc.code < 500 and exc.code != 429:
                    raise ProviderError(f"HTTP {exc.code} from {self.endpoint}") from exc
                last = exc
            except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
                last = exc
            if attempt + 1 < self.retries:
                time.sleep(self.backoff * 2 ** attempt)
        else:
            raise ProviderError(f"{self.endpoint} failed after {self.retries} attempt(s): {last}")
        raw = str(body.get("raw", ""))
        if "rating" in body:
            try:
                return normalize_rating(body["rating"])
            except UnparseableRating:
                pass
        return parse_rating_text(raw)


class VerdictCache:
    """(provider tag, user, item, channel) -> rating, optionally persisted as verdict JSONL."""

    def __init__(self, path=None, provider_tag: str = ""):
        self.path = Path(path) if path is not None else None
        self.provider_tag = provider_tag
        self._data: Dict[Tuple[str, int, int, str], str] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            for v in load_verdicts(self.path, allow_partial=True):
                for ch, r in (("user", v.r_user), ("item", v.r_item)):
                    if r:
                        self._data[(v.provider or provider_tag, v.user, v.item, ch)] = r

    def get(self, tag, user, item, channel) -> Optional[str]:
        with self._lock:
            return self._data.get((tag, int(user), int(item), channel))

    def put(self, tag, user, item, channel, rating) -> None:
        with self._lock:
            self._data[(tag, int(user), int(item), channel)] = rating

    def __len__(self) -> int:
        return len(self._data)

    def flush(self) -> None:
        if self.path is None:
            return
        merged: Dict[Tuple[str, int, int], Dict[str, str]] = {}
        with self._lock:
            for (tag, u, i, ch), r in self._data.items():
                merged.setdefault((tag, u, i), {})[ch] = r
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            for (tag, u, i), rs in sorted(merged.items()):
                fh.write(json.dumps({"user": u, "item": i, "user_rating": rs.get("user", ""),
                                     "item_rating": rs.get("item", ""), "provider": tag}) + "\n")
        os.replace(tmp, self.path)


def _cached_rate(provider: OracleProvider, channel: str, user: int, item: int, variables: Dict[str, str],
                 cache: Optional[VerdictCache]) -> str:
    if cache is not None:
        hit = cache.get(provider.tag, user, item, channel)
        if hit is not None:
            return hit
    rating = normalize_rating(provider.rate(channel, user, item, variables))
    if cache is not None:
        cache.put(provider.tag, user, item, channel, rating)
    return rating


def _profile(getter, key, fallback: str) -> str:
    if getter is None:
        return fallback
    return getter(key)


def rate_user_based(provider: OracleProvider, user: int, item: int, profiles: Optional[ProfileStore] = None,
                    cache: Optional[VerdictCache] = None) -> str:
    variables = {
        "user_profile": _profile(profiles and profiles.user, user, f"user {user}"),
        "item_profile": _profile(profiles and profiles.item, item, f"item {item}"),
    }
    return _cached_rate(provider, "user", user, item, variables, cache)


def rate_item_based(provider: OracleProvider, user: int, item: int, evidence: Sequence[int],
                    profiles: Optional[ProfileStore] = None, cache: Optional[VerdictCache] = None) -> str:
    if len(evidence) == 0:
        raise ValueError("item-based rating needs at least one evidence item")
    lines = [f"- {_profile(profiles and profiles.item, j, f'item {j}')}" for j in evidence]
    variables = {
        "evidence_profiles": "\n".join(lines),
        "item_profile": _profile(profiles and profiles.item, item, f"item {item}"),
    }
    return _cached_rate(provider, "item", user, item, variables, cache)


def rate_candidates(provider: OracleProvider, candidates: Sequence[CandidatePair], pretrain_scores: np.ndarray,
                    positives: Sequence[np.ndarray], profiles: Optional[ProfileStore] = None, k_item: int = 5,
                    cache: Optional[VerdictCache] = None, max_workers: int = 1) -> List[RelevanceVerdict]:
    """Both channel ratings for every candidate, in candidate order."""

    def one(c: CandidatePair) -> RelevanceVerdict:
        evidence = item_evidence(pretrain_scores[c.user], positives[c.user], k_item)
        return RelevanceVerdict(
            c.user, c.item,
            rate_user_based(provider, c.user, c.item, profiles, cache),
            rate_item_based(provider, c.user, c.item, evidence, profiles, cache),
            provider.tag,
        )

    if max_workers <= 1:
        verdicts = [one(c) for c in candidates]
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            verdicts = list(pool.map(one, candidates))
    if cache is not None:
        cache.flush()
    return verdicts


def classify(verdicts: Iterable[RelevanceVerdict], candidates: Iterable[CandidatePair]):
    """Split candidates into (hard, noisy) pair sets; hard means High on both channels."""
    by_pair = {(v.user, v.item): v for v in verdicts}
    pairs = {(c.user, c.item) for c in candidates}
    missing = sorted(pairs - by_pair.keys())
    if missing:
        raise ValueError(f"{len(missing)} candidate(s) without a verdict, e.g. {missing[:10]}")
    hard = {p for p in pairs if by_pair[p].r_user == "High" and by_pair[p].r_item == "High"}
    return hard, pairs - hard


def save_verdicts(verdicts: Iterable[RelevanceVerdict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in verdicts:
            fh.write(json.dumps({"user": v.user, "item": v.item, "user_rating": v.r_user,
                                 "item_rating": v.r_item}) + "\n")


def load_verdicts(path, allow_partial: bool = False) -> List[RelevanceVerdict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ru, ri = rec.get("user_rating", ""), rec.get("item_rating", "")
                ru = normalize_rating(ru) if (ru or not allow_partial) else ""
                ri = normalize_rating(ri) if (ri or not allow_partial) else ""
                out.append(RelevanceVerdict(int(rec["user"]), int(rec["item"]), ru, ri, rec.get("provider", "")))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad verdict record ({exc})") from None
    return out


def save_candidates(candidates: Iterable[CandidatePair], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for c in candidates:
            fh.write(f"{c.user}\t{c.item}\t{c.channel}\t{c.pretrain_score!r}\n")


def load_candidates(path) -> List[CandidatePair]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                u, i, ch, s = line.rstrip("\n").split("\t")
                out.append(CandidatePair(int(u), int(i), ch, float(s)))
    return out


def save_pairs(pairs: Iterable[Tuple[int, int]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, i in sorted(pairs):
            fh.write(f"{u}\t{i}\n")


def load_pairs(path) -> Set[Tuple[int, int]]:
    out = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                u, i = line.split("\t")[:2]
                out.add((int(u), int(i)))
    return out
