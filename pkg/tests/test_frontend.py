import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from splitrank import nncore
from splitrank.broker import Broker, LocalEndpoint
from splitrank.embedstore import build_dictionary, save_dictionary
from splitrank.errors import ConfigError, VersionError
from splitrank.features import MemberProfile, parse_query
from splitrank.frontend import Frontend, build_query_representation
from splitrank.indexer import build_shards, compute_member_vectors
from splitrank.latency import LatencyRecorder, nearest_rank, record_latency
from splitrank.searcher import SearcherNode, ShardSnapshot
from splitrank.splitter import ModelVersion, save_bundle, split
from splitrank.synth import query_token_frequency

# ----------------------------------------------------------------- parse


def test_trigram_example():
    assert parse_query("java").trigrams == ["#ja", "jav", "ava", "va#"]


def test_facet_only_query():
    f = parse_query("", {"skill": ["finance"]})
    assert f.trigrams == [] and f.facets == {1: ["finance"]}
    assert f.token_count() == 1


def test_trigrams_match_window_recount():
    text = "Java Developer"
    got = Counter(parse_query(text).trigrams)
    assert got == Counter(oracles.sliding_trigrams(text))


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet=st.sampled_from("abcXYZ019 -_.#é"), max_size=40))
def test_trigrams_property(text):
    assert Counter(parse_query(text).trigrams) == Counter(oracles.sliding_trigrams(text))


def test_terms_cover_words_and_facets():
    f = parse_query("Senior java", {"skill": ["java", "java"], "location": ["sf"]})
    assert f.terms() == [(2, "senior"), (2, "java"), (1, "java"), (4, "sf")]


def test_unknown_facet():
    with pytest.raises(KeyError):
        parse_query("", {"hobby": ["chess"]})


# ------------------------------------------------------------------ qrep

@pytest.fixture
def query_side(tiny_model):
    qb = split(tiny_model, ModelVersion(6))[0]
    return qb, build_dictionary(qb, 1000, {})


def test_qrep_matches_forward_arm(query_side, tiny_vocab):
    qb, d = query_side
    rng = np.random.default_rng(0)
    for _ in range(50):
        ids = {f: [int(x) for x in rng.integers(0, tiny_vocab.size(f), rng.integers(0, 4))] for f in (0, 1, 2)}
        toks = {f: [tiny_vocab.tokens(f)[i] for i in v] for f, v in ids.items()}
        qrep, misses = build_query_representation(d, qb, toks)
        assert misses == 0
        np.testing.assert_allclose(qrep, nncore.forward_arm(qb.arm, ids), atol=1e-6)


def test_qrep_all_missing(query_side):
    qb, d = query_side
    toks = {0: ["zz1", "zz2"], 1: ["nope"], 2: []}
    qrep, misses = build_query_representation(d, qb, toks)
    assert misses == 3
    np.testing.assert_allclose(qrep, nncore.forward_arm(qb.arm, {0: [], 1: [], 2: []}), atol=1e-6)


def test_qrep_duplicate_multiplicity(query_side, tiny_vocab):
    qb, d = query_side
    twice, _ = build_query_representation(d, qb, {0: ["t1", "t1", "t2"], 1: [], 2: []})
    ids = [tiny_vocab.token_id(0, t) for t in ("t1", "t1", "t2")]
    np.testing.assert_allclose(twice, nncore.forward_arm(qb.arm, {0: ids, 1: [], 2: []}), atol=1e-6)
    once, _ = build_query_representation(d, qb, {0: ["t1", "t2"], 1: [], 2: []})
    assert not np.allclose(twice, once)


def test_qrep_version_mismatch(query_side, tiny_model):
    _, d = query_side
    other = split(tiny_model, ModelVersion(7))[0]
    with pytest.raises(VersionError):
        build_query_representation(d, other, {0: []})
    with pytest.raises(ConfigError):
        Frontend(d, other, backend=None)


def test_miss_count_monotone_in_k(tiny_model, tiny_vocab):
    qb = split(tiny_model, 1)[0]
    rng = np.random.default_rng(2)
    freq = {f: {t: int(rng.integers(1, 100)) for t in tiny_vocab.tokens(f)} for f in (0, 1, 2)}
    toks = {0: ["t1", "t5", "t9", "t13"], 1: ["s0", "s7"], 2: ["b"]}
    misses = [build_query_representation(build_dictionary(qb, k, freq), qb, toks)[1] for k in range(21, -1, -1)]
    assert all(a <= b for a, b in zip(misses, misses[1:]))
    assert misses[0] == 0 and misses[-1] == 7


# ------------------------------------------------------------ end to end

def _stack(model, profiles, quantization, version=1, **kw):
    qb, mb, cb = split(model, ModelVersion(version))
    vecs = compute_member_vectors(mb, profiles)
    shards = build_shards(profiles, vecs, 1, version, quantization=quantization)
    nodes = [SearcherNode(ShardSnapshot(s.shard_id, s.forward, s.inverted, version), cb) for s in shards]
    broker = Broker([LocalEndpoint(n) for n in nodes])
    d = build_dictionary(qb, 10**6, {})
    return Frontend(d, qb, broker, **kw)


def test_one_member_corpus(tiny_model):
    fe = _stack(tiny_model, [MemberProfile(42, {1: ["s3"], 2: ["b"]})], "int8")
    out = fe.handle_search("", {"skill": ["s3"]}, 5)
    assert [h.uid for h in out["hits"]] == [42]
    assert set(out["trace"]) == {"parse_us", "qarm_us", "backend_us", "total_us"}
    assert out["degraded"] == []


@pytest.mark.parametrize("quantization,tol", [("int8", 0.01), ("none", 1e-5)])
def test_top_hit_matches_monolithic_score(small_trained, small_data, quantization, tol):
    fe = _stack(small_trained, small_data.members, quantization, w_term=0.0, max_candidates=10**6)
    for q in small_data.queries[:20]:
        out = fe.handle_search(q["text"], q["facets"], 3)
        top = out["hits"][0]
        member = next(m for m in small_data.members if m.uid == top.uid)
        expected = nncore.score_pair(small_trained, parse_query(q["text"], q["facets"]), member)
        assert top.score == pytest.approx(expected, abs=tol)


def test_w_sem_zero_matches_term_only(small_trained, small_data):
    fe = _stack(small_trained, small_data.members, "int8", max_candidates=10**6)
    for q in small_data.queries[:10]:
        a = fe.handle_search(q["text"], q["facets"], 20, w_sem=0.0)
        feats = parse_query(q["text"], q["facets"])
        terms = feats.terms()
        scored = []
        for m in small_data.members:
            frac = sum(t in m.fields.get(f, []) for f, t in terms) / len(terms)
            if frac > 0:
                scored.append((-frac, m.uid))
        assert [h.uid for h in a["hits"]] == [u for _, u in sorted(scored)[:20]]


def test_single_query_arm_evaluation(small_trained, small_data):
    fe = _stack(small_trained, small_data.members, "int8", max_candidates=10**6)
    for i, q in enumerate(small_data.queries[:15], 1):
        fe.handle_search(q["text"], q["facets"], 10)
        assert fe.query_arm_evaluations == i
    assert len(fe.latency) == 15
    assert set(fe.latency.report()) == {"parse_us", "qarm_us", "backend_us", "total_us"}


def test_handle_wire_message(tiny_model):
    fe = _stack(tiny_model, [MemberProfile(1, {1: ["s1"]}), MemberProfile(2, {1: ["s2"]})], "int8")
    reply = fe.handle({"type": "user_search", "text": "", "facets": {"skill": ["s2"]}, "k": 3})
    assert reply["type"] == "results" and reply["hits"][0]["uid"] == 2
    assert fe.handle({"type": "search"})["type"] == "error"
    assert fe.handle({"type": "user_search", "facets": {"hobby": ["x"]}})["code"] == "bad_input"


def test_backend_error_surfaces(query_side):
    qb, d = query_side

    class Down:
        def request(self, message):
            return {"type": "error", "code": "all_shards_failed", "message": "no shards"}

    fe = Frontend(d, qb, Down())
    reply = fe.handle({"type": "user_search", "text": "x"})
    assert reply == {"type": "error", "code": "all_shards_failed", "message": reply["message"]}


def test_from_config(query_side, tmp_path):
    qb, d = query_side
    save_dictionary(d, tmp_path / "dict.embd")
    save_bundle(qb, tmp_path / "query")
    cfg = {"dictionary": "dict.embd", "query_arm": "query", "broker": "127.0.0.1:9", "w_sem": 0.5, "k": 7}
    (tmp_path / "fe.json").write_text(json.dumps(cfg))
    fe = Frontend.from_config(tmp_path / "fe.json")
    assert fe.w_sem == 0.5 and fe.k == 7 and fe.dictionary == d
    (tmp_path / "bad.json").write_text(json.dumps({"dictionary": "missing"}))
    with pytest.raises(ConfigError):
        Frontend.from_config(tmp_path / "bad.json")


def test_query_token_frequency_feeds_dictionary(small_trained, small_data):
    qb = split(small_trained, 1)[0]
    freq = query_token_frequency(small_data.train)
    d = build_dictionary(qb, 5, freq)
    for f, table in d.entries.items():
        counts = freq.get(f, {})
        kept = sorted(counts.get(t, 0) for t in table)
        dropped = [c for t, c in counts.items() if t not in table and t in qb.arm.vocab.tokens(f)]
        if kept and dropped:
            assert min(kept) >= max(dropped)


# --------------------------------------------------------------- latency

def test_latency_constant():
    assert record_latency([{"x": 3.0}] * 10) == {"x": {"p50": 3.0, "p90": 3.0, "p99": 3.0}}


def test_latency_one_to_hundred():
    rep = record_latency([{"total": float(v)} for v in range(1, 101)])
    assert rep["total"] == {"p50": 50.0, "p90": 90.0, "p99": 99.0}


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=300), st.sampled_from([50, 90, 99]))
def test_latency_matches_sort_oracle(values, p):
    assert nearest_rank(values, p) == oracles.nearest_rank(values, p)


def test_latency_requires_traces():
    with pytest.raises(ValueError):
        record_latency([])


def test_recorder_window():
    r = LatencyRecorder(window=5)
    for v in range(10):
        r.add({"t": v})
    assert [t["t"] for t in r.traces()] == [5, 6, 7, 8, 9]
