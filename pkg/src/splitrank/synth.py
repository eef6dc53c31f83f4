"""Synthetic talent-search corpus with planted semantic structure.

Members belong to latent clusters.  Every cluster owns a set of skill
concepts; some concepts have a query-side alias, a second token with the
same cluster affinity that no member profile ever carries.  Queries built
from aliases share no skill or title token with any relevant member, so
only a model that learned the alias-to-cluster association can rank them.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .features import (FIELD_COMPANY, FIELD_LOCATION, FIELD_SKILL, FIELD_TEXT, FIELD_TITLE, MemberProfile,
                       parse_query, text_trigrams)
from .errors import InputError
from .nncore import TrainExample
from .vocab import Vocabulary

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
SENIORITY = ("junior", "senior", "lead", "staff", "principal")


@dataclass
class SyntheticConfig:
    seed: int = 7
    n_members: int = 50000
    n_clusters: int = 20
    concepts_per_cluster: int = 8
    synonym_groups: int = 4
    titles_per_cluster: int = 3
    companies_per_cluster: int = 10
    n_locations: int = 5
    skills_per_member: tuple[int, int] = (3, 6)
    noise_skills: float = 1.5
    company_affinity: float = 0.7
    train_queries_per_cluster: int = 200
    test_queries_per_cluster: int = 10
    synonym_query_rate: float = 0.3
    pairs_per_query: int = 5
    zipf: float = 1.0

    def __post_init__(self):
        self.skills_per_member = tuple(self.skills_per_member)
        if self.n_clusters < 2:
            raise InputError("n_clusters must be >= 2")
        if self.n_members < self.n_clusters:
            raise InputError("need at least one member per cluster")
        if not 0 <= self.synonym_groups <= self.concepts_per_cluster:
            raise InputError("synonym_groups must lie in [0, concepts_per_cluster]")

    @classmethod
    def from_json(cls, path) -> SyntheticConfig:
        return cls(**json.loads(Path(path).read_text()))


class _Names:
    """Unique pronounceable pseudo-words drawn from a seeded generator."""

    def __init__(self, rng):
        self.rng = rng
        self.used = set(SENIORITY)

    def __call__(self, syllables=3) -> str:
        while True:
            word = "".join(self.rng.choice(list(_CONSONANTS)) + self.rng.choice(list(_VOWELS))
                           for _ in range(syllables))
            if word not in self.used:
                self.used.add(word)
                return word


def _zipf_weights(n, s):
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


@dataclass
class SyntheticData:
    config: SyntheticConfig
    members: list[MemberProfile]
    clusters: dict[int, int]
    train: list[dict]
    heldout: list[dict]
    queries: list[dict]
    judgments: list[dict]
    vocab: Vocabulary


def gen_synthetic(config: SyntheticConfig | None = None) -> SyntheticData:
    cfg = config or SyntheticConfig()
    rng = np.random.default_rng(cfg.seed)
    name = _Names(rng)
    C, K = cfg.n_clusters, cfg.concepts_per_cluster
    skills = [[name() for _ in range(K)] for _ in range(C)]
    aliases = [[name() for _ in range(cfg.synonym_groups)] for _ in range(C)]
    titles = [[name(2) for _ in range(cfg.titles_per_cluster)] for _ in range(C)]
    companies = [[name() for _ in range(cfg.companies_per_cluster)] for _ in range(C)]
    locations = [name(2) for _ in range(cfg.n_locations)]
    concept_w = _zipf_weights(K, cfg.zipf)
    title_w = _zipf_weights(cfg.titles_per_cluster, cfg.zipf)
    all_skills = [s for cl in skills for s in cl]

    uids = rng.choice(np.arange(1, 20 * cfg.n_members + 1), size=cfg.n_members, replace=False)
    member_cluster = rng.integers(0, C, size=cfg.n_members)
    members, clusters, by_cluster = [], {}, [[] for _ in range(C)]
    lo, hi = cfg.skills_per_member
    for uid, c in zip(uids.tolist(), member_cluster.tolist()):
        n_sk = int(rng.integers(lo, hi + 1))
        picked = rng.choice(K, size=min(n_sk, K), replace=False, p=concept_w)
        sk = [skills[c][i] for i in sorted(picked)]
        for _ in range(int(rng.poisson(cfg.noise_skills))):
            other = all_skills[int(rng.integers(len(all_skills)))]
            if other not in sk:
                sk.append(other)
        title = [SENIORITY[int(rng.integers(len(SENIORITY)))], titles[c][int(rng.choice(len(titles[c]), p=title_w))]]
        if rng.random() < cfg.company_affinity:
            company = companies[c][int(rng.integers(cfg.companies_per_cluster))]
        else:
            company = companies[int(rng.integers(C))][int(rng.integers(cfg.companies_per_cluster))]
        loc = locations[int(rng.integers(cfg.n_locations))]
        fields = {FIELD_TEXT: text_trigrams(" ".join(title)), FIELD_SKILL: sk, FIELD_TITLE: title,
                  FIELD_COMPANY: [company], FIELD_LOCATION: [loc]}
        members.append(MemberProfile(int(uid), fields))
        clusters[int(uid)] = c
        by_cluster[c].append(int(uid))

    def make_query(c):
        synonym = cfg.synonym_groups > 0 and rng.random() < cfg.synonym_query_rate
        n = int(rng.integers(1, 3))
        if synonym:
            pool = aliases[c]
            chosen = rng.choice(len(pool), size=min(n, len(pool)), replace=False)
            sk = [pool[i] for i in sorted(chosen)]
            text = ""
        else:
            chosen = rng.choice(K, size=n, replace=False, p=concept_w)
            sk = [skills[c][i] for i in sorted(chosen)]
            text = titles[c][int(rng.choice(len(titles[c]), p=title_w))] if rng.random() < 0.5 else ""
        facets = {"skill": sk, "location": [locations[int(rng.integers(cfg.n_locations))]]}
        return {"cluster": c, "text": text, "facets": facets, "synonym": bool(synonym)}

    def triples(queries):
        out = []
        for q in queries:
            c = q["cluster"]
            for _ in range(cfg.pairs_per_query):
                pos = by_cluster[c][int(rng.integers(len(by_cluster[c])))]
                oc = (c + 1 + int(rng.integers(C - 1))) % C
                neg = by_cluster[oc][int(rng.integers(len(by_cluster[oc])))]
                out.append({"qid": q["qid"], "query": {"text": q["text"], "facets": q["facets"]},
                            "positive": pos, "negative": neg})
        return out

    train_q, test_q = [], []
    for c in range(C):
        if not by_cluster[c]:
            raise InputError(f"cluster {c} drew no members; raise n_members")
        for _ in range(cfg.train_queries_per_cluster):
            train_q.append(make_query(c))
        for _ in range(cfg.test_queries_per_cluster):
            test_q.append(make_query(c))
    for i, q in enumerate(train_q):
        q["qid"] = f"tr{i}"
    for i, q in enumerate(test_q):
        q["qid"] = f"te{i}"
    n_held = max(1, len(train_q) // 10)
    held_idx = set(rng.choice(len(train_q), size=n_held, replace=False).tolist())
    heldout = triples([q for i, q in enumerate(train_q) if i in held_idx])
    train = triples([q for i, q in enumerate(train_q) if i not in held_idx])
    judgments = [{"qid": q["qid"], "relevant": sorted(by_cluster[q["cluster"]])} for q in test_q]

    streams = {f: [] for f in (FIELD_TEXT, FIELD_SKILL, FIELD_TITLE, FIELD_COMPANY, FIELD_LOCATION)}
    for m in members:
        for f, toks in m.fields.items():
            streams[f].extend(toks)
    for q in train_q + test_q:
        for f, toks in parse_query(q["text"], q["facets"]).model_inputs().items():
            streams[f].extend(toks)
    vocab = Vocabulary.from_iterables(streams)
    return SyntheticData(cfg, members, clusters, train, heldout, test_q, judgments, vocab)


def _write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n")


def write_synthetic(data: SyntheticData, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out / "corpus.jsonl", (m.to_json() for m in data.members))
    _write_jsonl(out / "train.jsonl", data.train)
    _write_jsonl(out / "heldout.jsonl", data.heldout)
    _write_jsonl(out / "queries.jsonl", data.queries)
    _write_jsonl(out / "judgments.jsonl", data.judgments)
    _write_jsonl(out / "clusters.jsonl", ({"uid": u, "cluster": c} for u, c in sorted(data.clusters.items())))
    (out / "vocab.json").write_text(json.dumps(data.vocab.to_dict(), sort_keys=True))
    (out / "config.json").write_text(json.dumps(asdict(data.config), sort_keys=True, indent=1))
    return out


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_triples(path, members: dict[int, MemberProfile]) -> list[TrainExample]:
    """Resolve ``train.jsonl`` rows into TrainExamples over parsed query features."""
    return triples_from_rows(read_jsonl(path), members)


def triples_from_rows(rows, members: dict[int, MemberProfile]) -> list[TrainExample]:
    return [TrainExample(parse_query(r["query"]["text"], r["query"]["facets"]),
                         members[int(r["positive"])], members[int(r["negative"])]) for r in rows]


def query_token_frequency(rows) -> dict[int, Counter]:
    """Per-field token counts over a query log (rows with ``text`` and ``facets``)."""
    freq: dict[int, Counter] = {}
    for r in rows:
        q = r.get("query", r)
        for f, toks in parse_query(q.get("text", ""), q.get("facets", {})).model_inputs().items():
            freq.setdefault(f, Counter()).update(toks)
    return freq
