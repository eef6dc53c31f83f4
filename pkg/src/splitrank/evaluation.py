"""Precision@k over a run file and relevance judgments."""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import InputError


@dataclass
class EvalReport:
    k: int
    per_query: dict[str, float] = field(default_factory=dict)
    skipped: int = 0

    @property
    def mean(self) -> float:
        return sum(self.per_query.values()) / len(self.per_query) if self.per_query else 0.0

    def to_json(self) -> dict:
        return {"k": self.k, "mean_precision": self.mean, "queries": len(self.per_query),
                "skipped": self.skipped, "per_query": self.per_query}


def precision_at_k(ranked, relevant, k: int) -> float:
    if k < 1:
        raise InputError("k must be >= 1")
    relevant = relevant if isinstance(relevant, (set, frozenset)) else set(relevant)
    return sum(1 for uid in list(ranked)[:k] if uid in relevant) / k


def evaluate(run, judgments, k: int = 10) -> EvalReport:
    """``run``: qid -> ranked uids; ``judgments``: qid -> relevant uids.

    Queries without judgments are skipped and counted.
    """
    if k < 1:
        raise InputError("k must be >= 1")
    run = _as_map(run, "hits")
    judged = {q: set(v) for q, v in _as_map(judgments, "relevant").items()}
    report = EvalReport(k)
    for qid, ranked in run.items():
        rel = judged.get(qid)
        if not rel:
            report.skipped += 1
            continue
        report.per_query[qid] = precision_at_k(ranked, rel, k)
    return report


def _as_map(rows, key):
    if isinstance(rows, dict):
        return rows
    out = {}
    for r in rows:
        vals = r[key]
        out[str(r["qid"])] = [v["uid"] if isinstance(v, dict) else int(v) for v in vals]
    return out
