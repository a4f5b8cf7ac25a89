import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from llmhni.data import DataWarning
from llmhni.oracle import (HIGH_SCORE_NEGATIVE, LOW_SCORE_POSITIVE, CandidatePair, FileProvider, HttpProvider,
                           MockProvider, ProviderError, RelevanceVerdict, UnparseableRating, VerdictCache,
                           build_candidates, classify, item_evidence, load_candidates, load_verdicts,
                           parse_rating_text, rate_candidates, rate_item_based, rate_user_based, render,
                           save_candidates, save_verdicts)


def test_candidates_examples():
    scores = np.array([[0.8, -0.5, 0.0, 0.9, 0.1]])
    cands = build_candidates(scores, [np.array([0, 1])], n1=1, n2=1)
    assert cands == [CandidatePair(0, 3, HIGH_SCORE_NEGATIVE, 0.9), CandidatePair(0, 1, LOW_SCORE_POSITIVE, -0.5)]


def test_candidate_count_identity():
    rng = np.random.default_rng(0)
    scores = rng.normal(size=(6, 8))
    positives = [np.array([0]), np.array([1, 2, 3]), np.arange(8), np.array([4, 5]), np.arange(7), np.array([2])]
    with pytest.warns(DataWarning):
        cands = build_candidates(scores, positives, n1=2, n2=2)
    expected = sum(min(2, 8 - len(p)) + min(2, len(p)) for p in positives)
    assert len(cands) == expected


@pytest.mark.parametrize("mode", ["deterministic", "stochastic"])
def test_candidate_channels_respect_labels(mode):
    rng = np.random.default_rng(1)
    scores = rng.normal(size=(5, 10))
    positives = [np.sort(rng.choice(10, 4, replace=False)) for _ in range(5)]
    for c in build_candidates(scores, positives, 2, 2, mode=mode, seed=3):
        assert (c.item in positives[c.user]) == (c.channel == LOW_SCORE_POSITIVE)
    assert build_candidates(scores, positives, mode=mode, seed=3) == build_candidates(scores, positives, mode=mode,
                                                                                       seed=3)


def test_item_evidence_clamped():
    assert list(item_evidence(np.array([0.1, 0.5, 0.0]), np.array([0, 1]), 5)) == [1, 0]


def test_mock_contract():
    m = MockProvider({(0, 1)})
    assert m.rate("user", 0, 1, {}) == "High"
    assert m.rate("item", 0, 2, {}) == "Low"
    assert MockProvider(set(), nonrelevant_rating="Mid").rate("user", 0, 0, {}) == "Mid"


def test_mock_flip_frequency():
    m = MockProvider(set(), flip_rate=0.2, seed=5)
    flips = sum(m.flipped("user", u, i) for u in range(100) for i in range(100))
    sigma = np.sqrt(10000 * 0.2 * 0.8)
    assert abs(flips - 2000) <= 3 * sigma


def test_file_provider_readback(tmp_path):
    p = tmp_path / "v.jsonl"
    p.write_text(json.dumps({"user": 0, "item": 5, "user_rating": "Mid", "item_rating": "High"}) + "\n")
    f = FileProvider(p)
    assert f.rate("user", 0, 5, {}) == "Mid" and f.rate("item", 0, 5, {}) == "High"
    with pytest.raises(ProviderError):
        f.rate("user", 1, 1, {})


def test_cache_hit_issues_no_calls(tmp_path):
    m = MockProvider({(0, 1)})
    cache = VerdictCache(tmp_path / "c.jsonl", m.tag)
    rate_user_based(m, 0, 1, cache=cache)
    rate_item_based(m, 0, 1, [2, 3], cache=cache)
    assert m.calls == 2
    rate_user_based(m, 0, 1, cache=cache)
    rate_item_based(m, 0, 1, [2, 3], cache=cache)
    assert m.calls == 2
    cache.flush()
    reopened = VerdictCache(tmp_path / "c.jsonl", m.tag)
    assert reopened.get("mock", 0, 1, "user") == "High"


def test_rerun_only_rates_uncached_pairs(tmp_path):
    scores = np.random.default_rng(2).normal(size=(4, 6))
    positives = [np.array([0, 1]), np.array([2]), np.array([3, 4]), np.array([5, 0])]
    cands = build_candidates(scores, positives, 1, 1)
    m = MockProvider(set())
    cache = VerdictCache(tmp_path / "c.jsonl", m.tag)
    rate_candidates(m, cands[:4], scores, positives, cache=cache)
    assert m.calls == 8
    rate_candidates(m, cands, scores, positives, cache=VerdictCache(tmp_path / "c.jsonl", m.tag))
    assert m.calls == 8 + 2 * (len(cands) - 4)


def test_classify_partition():
    cands = [CandidatePair(0, i, HIGH_SCORE_NEGATIVE, 0.0) for i in range(4)]
    verdicts = [RelevanceVerdict(0, 0, "High", "High"), RelevanceVerdict(0, 1, "High", "Mid"),
                RelevanceVerdict(0, 2, "Low", "High"), RelevanceVerdict(0, 3, "Low", "Low")]
    hard, noisy = classify(verdicts, cands)
    assert hard == {(0, 0)} and noisy == {(0, 1), (0, 2), (0, 3)}
    with pytest.raises(ValueError, match="without a verdict"):
        classify(verdicts[:2], cands)


def test_mock_fidelity_with_zero_flip_rate():
    rng = np.random.default_rng(3)
    scores = rng.normal(size=(20, 15))
    positives = [np.sort(rng.choice(15, 4, replace=False)) for _ in range(20)]
    relevant = {(u, int(i)) for u in range(20) for i in rng.choice(15, 5, replace=False)}
    cands = build_candidates(scores, positives)
    verdicts = rate_candidates(MockProvider(relevant), cands, scores, positives, max_workers=4)
    hard, noisy = classify(verdicts, cands)
    assert hard == {(c.user, c.item) for c in cands} & relevant
    assert hard | noisy == {(c.user, c.item) for c in cands} and not hard & noisy


def test_parse_rating_text():
    assert parse_rating_text("Analysis: fine.\nRating: HIGH") == "High"
    assert parse_rating_text("my rating would be mid, not high") == "Mid"
    with pytest.raises(UnparseableRating) as err:
        parse_rating_text("I think it is High")
    assert err.value.raw == "I think it is High"


def test_templates_render():
    text = render("user", {"user_profile": "likes jazz", "item_profile": "a saxophone"})
    assert "likes jazz" in text and "a saxophone" in text
    assert "- a" in render("item", {"evidence_profiles": "- a\n- b", "item_profile": "c"})


def test_file_round_trips(tmp_path):
    cands = [CandidatePair(1, 2, LOW_SCORE_POSITIVE, -0.25)]
    save_candidates(cands, tmp_path / "c.tsv")
    assert load_candidates(tmp_path / "c.tsv") == cands
    vs = [RelevanceVerdict(1, 2, "Mid", "Low")]
    save_verdicts(vs, tmp_path / "v.jsonl")
    assert load_verdicts(tmp_path / "v.jsonl") == vs


class _Handler(BaseHTTPRequestHandler):
    responses = []
    requests = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).requests.append((body, self.headers.get("Authorization")))
        status, payload = type(self).responses.pop(0)
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(json.dumps(payload).encode())

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    _Handler.responses, _Handler.requests = [], []
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    yield f"http://127.0.0.1:{srv.server_port}/rate", _Handler
    srv.shutdown()


def test_http_provider_contract(server, monkeypatch):
    url, handler = server
    monkeypatch.setenv("TEST_KEY", "secret")
    handler.responses += [(200, {"rating": "Mid", "raw": "..."}), (200, {"raw": "Rating: low"})]
    p = HttpProvider(url, api_key_env="TEST_KEY", retries=1)
    assert p.rate("user", 0, 1, {"user_profile": "x"}) == "Mid"
    assert p.rate("item", 0, 1, {}) == "Low"
    body, auth = handler.requests[0]
    assert body == {"template_id": "user", "variables": {"user_profile": "x"}} and auth == "secret"


def test_http_provider_retries_then_fails(server):
    url, handler = server
    handler.responses += [(503, {}), (200, {"rating": "High"})]
    assert HttpProvider(url, retries=2, backoff=0.0).rate("user", 0, 0, {}) == "High"
    handler.responses += [(500, {}), (500, {})]
    with pytest.raises(ProviderError):
        HttpProvider(url, retries=2, backoff=0.0).rate("user", 0, 0, {})


def test_http_provider_unparseable(server):
    url, handler = server
    handler.responses.append((200, {"rating": "??", "raw": "no idea"}))
    with pytest.raises(UnparseableRating) as err:
        HttpProvider(url, retries=1).rate("user", 0, 0, {})
    assert err.value.raw == "no idea"
