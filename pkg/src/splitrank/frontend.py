"""Online query processing: parse, run the query arm once, call the backend."""
from __future__ import annotations

import json
import threading
import time
from pathlib import Path

import numpy as np

from .embedstore import EmbeddingDictionary, load_dictionary
from .errors import ConfigError, InputError, SplitRankError, VersionError
from .features import QueryFeatures, parse_query
from .latency import LatencyRecorder
from .searcher import SearchHit, SearchRequest
from .splitter import QueryArmBundle, load_bundle
from .wire import Client

__all__ = ["Frontend", "build_query_representation", "parse_query"]


def build_query_representation(dictionary: EmbeddingDictionary, bundle: QueryArmBundle,
                               features: QueryFeatures) -> tuple[np.ndarray, int]:
    """Pool dictionary vectors per field (misses skipped and counted), then
    run the query arm's dense stack.  Returns ``(qrep, miss_count)``."""
    if dictionary.version.version_id != bundle.version.version_id:
        raise VersionError(f"dictionary version {dictionary.version.version_id} "
                           f"!= query arm version {bundle.version.version_id}")
    arm = bundle.arm
    inputs = features.model_inputs() if hasattr(features, "model_inputs") else features
    parts, misses = [], 0
    for fs in arm.spec.fields:
        table = dictionary.entries.get(fs.field_id, {})
        found = []
        for tok in inputs.get(fs.field_id, ()):
            vec = table.get(tok)
            if vec is None:
                misses += 1
            else:
                found.append(vec)
        if found:
            pooled = np.sum(found, axis=0, dtype=np.float32)
            if fs.pooling == "mean":
                pooled = pooled / np.float32(len(found))
        else:
            pooled = np.zeros(fs.embed_dim, dtype=np.float32)
        parts.append(pooled)
    x = np.concatenate(parts).astype(arm.dtype)[None]
    return arm.dense(x)[0], misses


class Frontend:
    def __init__(self, dictionary: EmbeddingDictionary, query_bundle: QueryArmBundle, backend, *,
                 w_sem=1.0, w_term=1.0, k=10, mode="any", max_candidates=10000):
        if dictionary.version.version_id != query_bundle.version.version_id:
            raise ConfigError(f"dictionary version {dictionary.version.version_id} does not match "
                              f"query arm version {query_bundle.version.version_id}")
        self.dictionary = dictionary
        self.bundle = query_bundle
        self.backend = backend
        self.w_sem = w_sem
        self.w_term = w_term
        self.k = k
        self.mode = mode
        self.max_candidates = max_candidates
        self.latency = LatencyRecorder()
        self.query_arm_evaluations = 0
        self._count_lock = threading.Lock()

    @property
    def version(self) -> int:
        return self.bundle.version.version_id

    @classmethod
    def from_config(cls, path) -> Frontend:
        try:
            cfg = json.loads(Path(path).read_text())
            base = Path(path).parent
            dictionary = load_dictionary(base / cfg["dictionary"])
            bundle = load_bundle(base / cfg["query_arm"])
            backend = Client(cfg["broker"], timeout=cfg.get("timeout_s", 5.0))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"{path}: bad frontend config ({exc})") from exc
        return cls(dictionary, bundle, backend, w_sem=cfg.get("w_sem", 1.0), w_term=cfg.get("w_term", 1.0),
                   k=cfg.get("k", 10), mode=cfg.get("mode", "any"),
                   max_candidates=cfg.get("max_candidates", 10000))

    def query_representation(self, features) -> tuple[np.ndarray, int]:
        qrep, misses = build_query_representation(self.dictionary, self.bundle, features)
        with self._count_lock:
            self.query_arm_evaluations += 1
        return qrep, misses

    def handle_search(self, raw_text: str, facets=None, k=None, *, w_sem=None, w_term=None,
                      mode=None, max_candidates=None) -> dict:
        t0 = time.perf_counter()
        features = parse_query(raw_text, facets)
        t1 = time.perf_counter()
        qrep, misses = self.query_representation(features)
        t2 = time.perf_counter()
        request = SearchRequest(
            self.version, [float(x) for x in qrep], features.terms(),
            mode or self.mode, int(max_candidates or self.max_candidates), int(k or self.k),
            self.w_sem if w_sem is None else float(w_sem), self.w_term if w_term is None else float(w_term),
        )
        reply = self.backend.request(request.to_wire())
        t3 = time.perf_counter()
        if reply.get("type") == "error":
            err = SplitRankError(f"backend error {reply.get('code')}: {reply.get('message')}")
            err.code = reply.get("code", "backend")
            raise err
        trace = {"parse_us": (t1 - t0) * 1e6, "qarm_us": (t2 - t1) * 1e6,
                 "backend_us": (t3 - t2) * 1e6, "total_us": (t3 - t0) * 1e6}
        self.latency.add(trace)
        return {"hits": [SearchHit.from_wire(h) for h in reply.get("hits", [])], "trace": trace,
                "degraded": reply.get("degraded", []), "misses": misses}

    def handle(self, message: dict) -> dict:
        try:
            if message.get("type") != "user_search":
                raise InputError(f"unknown message type {message.get('type')!r}")
            opts = {o: message[o] for o in ("w_sem", "w_term", "mode", "max_candidates") if o in message}
            out = self.handle_search(str(message.get("text", "")), message.get("facets") or {},
                                     message.get("k"), **opts)
        except SplitRankError as exc:
            return {"type": "error", "code": exc.code, "message": str(exc)}
        except (KeyError, TypeError, ValueError) as exc:
            return {"type": "error", "code": "bad_input", "message": str(exc)}
        return {"type": "results", "hits": [h.to_wire() for h in out["hits"]], "trace": out["trace"],
                "degraded": out["degraded"], "misses": out["misses"]}

    request = handle
