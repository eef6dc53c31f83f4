"""Scatter-gather tier: fan a search out to every shard, merge the top-k."""
from __future__ import annotations

import heapq
import itertools
import json
import logging
from concurrent.futures import ThreadPoolExecutor, wait
from pathlib import Path

from .errors import BrokerError, ConfigError, InputError, SplitRankError
from .searcher import SearchHit, SearchRequest
from .wire import Client

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT_MS = 500


def _sort_key(hit: SearchHit):
    return (-hit.score, hit.uid)


def merge(responses, k: int) -> list[SearchHit]:
    """k-way merge of per-shard hit lists already sorted by (score desc, uid asc)."""
    lists = []
    for r in responses:
        hits = r if isinstance(r, list) else r["hits"] if isinstance(r, dict) else r.hits
        lists.append([h if isinstance(h, SearchHit) else SearchHit.from_wire(h) for h in hits])
    return list(itertools.islice(heapq.merge(*lists, key=_sort_key), k))


class LocalEndpoint:
    """In-process stand-in for a remote node; anything with ``request(dict)``."""

    def __init__(self, node, name="local"):
        self.node = node
        self.endpoint = name

    def request(self, message: dict) -> dict:
        return self.node.handle(message)


class Broker:
    def __init__(self, endpoints, timeout_ms: float = DEFAULT_TIMEOUT_MS, max_workers: int | None = None):
        if not endpoints:
            raise ConfigError("broker needs at least one shard endpoint")
        self.timeout = timeout_ms / 1000
        self.clients = [Client(e, timeout=self.timeout) if isinstance(e, str) else e for e in endpoints]
        self._pool = ThreadPoolExecutor(max_workers=max_workers or max(4, 2 * len(self.clients)),
                                        thread_name_prefix="fanout")

    @classmethod
    def from_config(cls, path) -> Broker:
        try:
            cfg = json.loads(Path(path).read_text())
            return cls(cfg["shards"], cfg.get("timeout_ms", DEFAULT_TIMEOUT_MS))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"{path}: bad broker config ({exc})") from exc

    def fan_out(self, message: dict) -> tuple[list[dict], list[int]]:
        """Dispatch to every shard concurrently; returns (responses, failed shard indexes).

        Raises BrokerError when no shard produced a usable response.
        """
        futures = {self._pool.submit(c.request, message): i for i, c in enumerate(self.clients)}
        done, _ = wait(futures, timeout=self.timeout)
        responses, failed, errors = [], [], []
        for fut, i in sorted(futures.items(), key=lambda kv: kv[1]):
            if fut not in done:
                failed.append(i)
                errors.append(f"shard {i}: timeout")
                continue
            try:
                reply = fut.result()
            except Exception as exc:
                failed.append(i)
                errors.append(f"shard {i}: {exc!r}")
                continue
            if reply.get("type") != "hits":
                failed.append(i)
                errors.append(f"shard {i}: {reply.get('code')}: {reply.get('message')}")
                continue
            responses.append(reply)
        if not responses:
            raise BrokerError("all shards failed: " + "; ".join(errors))
        if failed:
            logger.warning("degraded response: %s", "; ".join(errors))
        return responses, failed

    def search(self, request: SearchRequest | dict) -> dict:
        message = request.to_wire() if isinstance(request, SearchRequest) else dict(request)
        message["type"] = "search"
        message.pop("shards", None)
        k = int(message.get("k", 10))
        responses, failed = self.fan_out(message)
        hits = merge(responses, k)
        timing = {"shards": {str(r["shard_id"]): r.get("timing", {}) for r in responses}}
        return {"type": "hits", "hits": [h.to_wire() for h in hits], "degraded": failed, "timing": timing}

    def handle(self, message: dict) -> dict:
        try:
            if message.get("type") != "search":
                raise InputError(f"unknown message type {message.get('type')!r}")
            SearchRequest.from_wire(message)
            return self.search(message)
        except SplitRankError as exc:
            return {"type": "error", "code": exc.code, "message": str(exc)}

    request = handle

    def close(self):
        self._pool.shutdown(wait=False)
        for c in self.clients:
            if hasattr(c, "close"):
                c.close()
