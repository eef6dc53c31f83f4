"""Searcher node: candidate retrieval, cross-layer scoring, live updates.

A searcher only ever reads its shard snapshot and the request payload; the
query representation arrives inside the request, the member vectors come
from the forward index.
"""
from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType

import numpy as np

from .errors import FormatError, InputError, SplitRankError, VersionError
from .features import MemberProfile
from .indexer import (SCHEME_INT8, ForwardIndex, ForwardIndexRecord, InvertedIndex, dequantize, quantize,
                      read_forward, read_inverted, term_key)
from .splitter import CrossBundle

logger = logging.getLogger(__name__)

_EMPTY = np.zeros(0, dtype=np.uint64)


# ----------------------------------------------------------------- snapshot


class ShardSnapshot:
    """Immutable view of one shard: base indexes plus a live-update overlay.

    Overlay records shadow base records with the same uid.  Updates build a
    new snapshot that shares the base arrays; old snapshots stay valid.
    """

    def __init__(self, shard_id: int, forward: ForwardIndex, inverted: InvertedIndex, version: int,
                 overlay: dict[int, ForwardIndexRecord] | None = None, generation: int = 0):
        self.shard_id = shard_id
        self.forward = forward
        self.inverted = inverted
        self.version = version
        self.generation = generation
        self.overlay = MappingProxyType(dict(overlay or {}))
        self._overlay_uids = np.array(sorted(self.overlay), dtype=np.uint64)
        terms: dict[str, list[int]] = {}
        for uid in sorted(self.overlay):
            for f, toks in self.overlay[uid].stored.items():
                for t in dict.fromkeys(toks):
                    terms.setdefault(term_key(f, t), []).append(uid)
        self._overlay_terms = {t: np.array(u, dtype=np.uint64) for t, u in terms.items()}
        if len(self._overlay_uids):
            ovecs = [r.vector if r.has_vector else np.zeros(forward.dim, np.float32) for r in
                     (self.overlay[int(u)] for u in self._overlay_uids)]
            self._overlay_vectors = np.stack(ovecs).astype(np.float64)
            self._overlay_versions = np.array([self.overlay[int(u)].field_version for u in self._overlay_uids],
                                              dtype=np.uint16)
        else:
            self._overlay_vectors = np.zeros((0, forward.dim))
            self._overlay_versions = np.zeros(0, dtype=np.uint16)

    @property
    def dim(self) -> int:
        return self.forward.dim

    def __len__(self):
        base = len(self.forward)
        if len(self._overlay_uids) and base:
            base -= int(np.count_nonzero(np.isin(self._overlay_uids, self.forward.uids)))
        return base + len(self._overlay_uids)

    def postings(self, field_id: int, token: str) -> np.ndarray:
        base = self.inverted.get(field_id, token)
        if not len(self._overlay_uids):
            return base
        base = base[~np.isin(base, self._overlay_uids, assume_unique=True)]
        extra = self._overlay_terms.get(term_key(field_id, token), _EMPTY)
        if not len(extra):
            return base
        return np.union1d(base, extra)

    def all_uids(self) -> np.ndarray:
        return np.union1d(self.forward.uids, self._overlay_uids)

    def member_vectors(self, uids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(float64 vectors, field versions) for uids known to the snapshot."""
        uids = np.asarray(uids, dtype=np.uint64)
        n = len(uids)
        if not len(self._overlay_uids):
            rows = self.forward.rows(uids)
            return self.forward.vectors(rows), self.forward.versions[rows]
        vecs = np.zeros((n, self.dim), dtype=np.float64)
        versions = np.zeros(n, dtype=np.uint16)
        in_overlay = np.isin(uids, self._overlay_uids) if len(self._overlay_uids) else np.zeros(n, bool)
        base_idx = np.flatnonzero(~in_overlay)
        if len(base_idx):
            rows = self.forward.rows(uids[base_idx])
            vecs[base_idx] = self.forward.vectors(rows)
            versions[base_idx] = self.forward.versions[rows]
        over_idx = np.flatnonzero(in_overlay)
        if len(over_idx):
            orows = np.searchsorted(self._overlay_uids, uids[over_idx])
            vecs[over_idx] = self._overlay_vectors[orows]
            versions[over_idx] = self._overlay_versions[orows]
        return vecs, versions

    def record(self, uid: int) -> ForwardIndexRecord:
        if uid in self.overlay:
            return self.overlay[uid]
        return self.forward.record(uid)

    def with_updates(self, records: list[ForwardIndexRecord]) -> ShardSnapshot:
        overlay = dict(self.overlay)
        for r in records:
            overlay[r.uid] = r
        return ShardSnapshot(self.shard_id, self.forward, self.inverted, self.version, overlay, self.generation + 1)


def load_shard(paths) -> ShardSnapshot:
    """Load a shard from its directory (or a ``(forward, inverted)`` path pair)."""
    if isinstance(paths, (str, Path)):
        directory = Path(paths)
        fwd_path, inv_path = directory / "forward.fwdx", directory / "inverted.invx"
        meta_path = directory / "shard.json"
    else:
        fwd_path, inv_path = (Path(p) for p in paths)
        meta_path = fwd_path.parent / "shard.json"
    for p in (fwd_path, inv_path):
        if not p.exists():
            raise FormatError(f"missing shard file {p}")
    forward = read_forward(fwd_path)
    inverted = read_inverted(inv_path)
    shard_id = 0
    if meta_path.exists():
        try:
            shard_id = int(json.loads(meta_path.read_text())["shard_id"])
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"{meta_path}: corrupt shard metadata") from exc
    present = set(np.unique(forward.versions).tolist()) - {0}
    if len(present) > 1:
        raise FormatError(f"{fwd_path}: mixed field versions {sorted(present)} in one shard")
    version = present.pop() if present else 0
    return ShardSnapshot(shard_id, forward, inverted, version)


# ---------------------------------------------------------------- retrieval


def retrieve(snapshot: ShardSnapshot, terms, mode="any", max_candidates=1000) -> np.ndarray:
    """Union (``any``) or intersection (``all``) of postings, ascending uid,
    cut off after ``max_candidates`` hits."""
    if max_candidates < 1:
        raise InputError("max_candidates must be >= 1")
    if mode not in ("any", "all"):
        raise InputError(f"unknown retrieval mode {mode!r}")
    lists = [snapshot.postings(int(f), str(t)) for f, t in dict.fromkeys((int(f), str(t)) for f, t in terms)]
    if not lists:
        return _EMPTY
    if mode == "all":
        lists.sort(key=len)
        out = lists[0]
        for other in lists[1:]:
            if not len(out):
                break
            out = np.intersect1d(out, other, assume_unique=True)
    else:
        out = lists[0] if len(lists) == 1 else np.unique(np.concatenate(lists))
    return out[:max_candidates]


# ------------------------------------------------------------------ scoring


@dataclass
class SearchHit:
    uid: int
    score: float
    semantic: float
    term_match: float

    def to_wire(self):
        return {"uid": self.uid, "score": self.score, "semantic": self.semantic, "term_match": self.term_match}

    @classmethod
    def from_wire(cls, d):
        return cls(int(d["uid"]), float(d["score"]), float(d["semantic"]), float(d["term_match"]))


@dataclass
class ScoredHits:
    """Column arrays of scored candidates, sorted by (score desc, uid asc)."""

    uids: np.ndarray
    scores: np.ndarray
    semantic: np.ndarray
    term_match: np.ndarray

    def __len__(self):
        return len(self.uids)

    def top(self, k: int) -> list[SearchHit]:
        return [SearchHit(int(u), float(s), float(se), float(t))
                for u, s, se, t in zip(self.uids[:k], self.scores[:k], self.semantic[:k], self.term_match[:k])]


def term_match_fraction(snapshot: ShardSnapshot, candidates: np.ndarray, qterms) -> np.ndarray:
    terms = list(dict.fromkeys((int(f), str(t)) for f, t in qterms))
    if not terms:
        return np.zeros(len(candidates))
    matched = np.zeros(len(candidates), dtype=np.int64)
    for f, t in terms:
        post = snapshot.postings(f, t)
        if len(post):
            matched += np.isin(candidates, post, assume_unique=True)
    return matched / len(terms)


def score_hits(snapshot: ShardSnapshot, candidates, qrep, qterms, cross_bundle: CrossBundle,
               w_sem=1.0, w_term=1.0, *, version=None, limit=None) -> ScoredHits:
    """Semantic similarity over the forward-index vector plus matched-term
    fraction, combined linearly.  Members without a vector (field version 0)
    score semantic 0.

    With ``limit`` only the best ``limit`` hits are ordered and returned; the
    result equals the first ``limit`` entries of the full ordering."""
    if cross_bundle.version.version_id != snapshot.version:
        raise VersionError(f"cross bundle version {cross_bundle.version.version_id} "
                           f"!= shard version {snapshot.version}")
    if version is not None and int(version) != snapshot.version:
        raise VersionError(f"request version {version} != shard version {snapshot.version}")
    qrep = np.asarray(qrep, dtype=np.float64)
    if qrep.shape != (cross_bundle.cross.query_dim,):
        raise InputError(f"qrep has shape {qrep.shape}, cross layer expects ({cross_bundle.cross.query_dim},)")
    cands = np.asarray(candidates, dtype=np.uint64)
    vecs, versions = snapshot.member_vectors(cands)
    if len(cands):
        semantic = cross_bundle.cross.score_query(qrep, vecs).astype(np.float64)
        semantic[versions == 0] = 0.0
    else:
        semantic = np.zeros(0)
    term = term_match_fraction(snapshot, cands, qterms)
    final = w_sem * semantic + w_term * term
    keep = np.arange(len(final))
    if limit is not None and 0 < limit < len(final):
        # everything tied with the limit-th score stays so uid order decides
        kth = np.partition(-final, limit - 1)[limit - 1]
        keep = np.flatnonzero(-final <= kth)
    order = keep[np.lexsort((cands[keep], -final[keep]))][:limit]
    return ScoredHits(cands[order], final[order], semantic[order], term[order])


# ------------------------------------------------------------------ search


@dataclass
class SearchRequest:
    version: int
    qrep: list[float]
    terms: list[tuple[int, str]]
    mode: str = "any"
    max_candidates: int = 10000
    k: int = 10
    w_sem: float = 1.0
    w_term: float = 1.0

    def to_wire(self) -> dict:
        return {"type": "search", "version": self.version, "qrep": [float(x) for x in self.qrep],
                "terms": [[int(f), str(t)] for f, t in self.terms], "mode": self.mode,
                "max_candidates": self.max_candidates, "k": self.k, "w_sem": self.w_sem, "w_term": self.w_term}

    @classmethod
    def from_wire(cls, d: dict) -> SearchRequest:
        try:
            req = cls(int(d["version"]), [float(x) for x in d["qrep"]],
                      [(int(f), str(t)) for f, t in d.get("terms", [])], str(d.get("mode", "any")),
                      int(d.get("max_candidates", 10000)), int(d.get("k", 10)),
                      float(d.get("w_sem", 1.0)), float(d.get("w_term", 1.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed search request: {exc}") from exc
        if req.k < 1:
            raise InputError("k must be >= 1")
        return req


@dataclass
class SearchResponse:
    shard_id: int
    hits: list[SearchHit]
    timing: dict = field(default_factory=dict)
    generation: int = 0

    def to_wire(self) -> dict:
        return {"type": "hits", "shard_id": self.shard_id, "hits": [h.to_wire() for h in self.hits],
                "timing": self.timing}


def search(snapshot: ShardSnapshot, request: SearchRequest, cross_bundle: CrossBundle) -> SearchResponse:
    t0 = time.perf_counter()
    cands = retrieve(snapshot, request.terms, request.mode, request.max_candidates)
    t1 = time.perf_counter()
    scored = score_hits(snapshot, cands, request.qrep, request.terms, cross_bundle,
                        request.w_sem, request.w_term, version=request.version, limit=request.k)
    hits = scored.top(request.k)
    t2 = time.perf_counter()
    timing = {"retrieve_us": round((t1 - t0) * 1e6, 1), "score_us": round((t2 - t1) * 1e6, 1)}
    return SearchResponse(snapshot.shard_id, hits, timing, snapshot.generation)


def apply_live_update(snapshot: ShardSnapshot, profile: MemberProfile, vector, version) -> ShardSnapshot:
    return apply_live_updates(snapshot, [(profile, vector)], version)


def apply_live_updates(snapshot: ShardSnapshot, updates, version) -> ShardSnapshot:
    """Copy-on-write update of one or more members in a single new snapshot."""
    version = int(getattr(version, "version_id", version))
    if version != snapshot.version:
        raise VersionError(f"update version {version} != shard version {snapshot.version}")
    records = []
    for profile, vector in updates:
        vec = np.asarray(vector, dtype=np.float32)
        if vec.shape != (snapshot.dim,):
            raise InputError(f"update vector has shape {vec.shape}, shard dim is {snapshot.dim}")
        qv = None
        if snapshot.forward.scheme == SCHEME_INT8:
            qv = quantize(vec)
            vec = dequantize(qv)
        stored = {f: list(profile.fields[f]) for f in sorted(profile.fields)}
        records.append(ForwardIndexRecord(int(profile.uid), version, vec, stored, qv))
    return snapshot.with_updates(records)


# --------------------------------------------------------------------- node


class SearcherNode:
    """Holds the current snapshot and the cross bundle; handles wire messages.

    Readers grab ``self.snapshot`` once per request; updaters swap the
    attribute under a lock, so a request never sees a half-applied update.
    """

    def __init__(self, snapshot: ShardSnapshot, cross_bundle: CrossBundle):
        if cross_bundle.version.version_id != snapshot.version:
            raise VersionError(f"cross bundle version {cross_bundle.version.version_id} "
                               f"!= shard version {snapshot.version}")
        self.snapshot = snapshot
        self.cross = cross_bundle
        self._update_lock = threading.Lock()

    def search(self, request: SearchRequest) -> SearchResponse:
        return search(self.snapshot, request, self.cross)

    def update(self, updates, version) -> ShardSnapshot:
        with self._update_lock:
            new = apply_live_updates(self.snapshot, updates, version)
            self.snapshot = new
        return new

    def handle(self, message: dict) -> dict:
        try:
            kind = message.get("type")
            if kind == "search":
                return self.search(SearchRequest.from_wire(message)).to_wire()
            if kind == "update":
                updates = [(MemberProfile.from_json(u), u["vector"]) for u in message["members"]]
                snap = self.update(updates, message["version"])
                return {"type": "updated", "shard_id": snap.shard_id, "generation": snap.generation}
            if kind == "ping":
                return {"type": "pong", "shard_id": self.snapshot.shard_id}
            raise InputError(f"unknown message type {kind!r}")
        except SplitRankError as exc:
            return {"type": "error", "code": exc.code, "message": str(exc)}
        except (KeyError, TypeError, ValueError) as exc:
            return {"type": "error", "code": "bad_input", "message": str(exc)}

    request = handle
