"""Closed-loop load generator with nearest-rank latency reporting."""
from __future__ import annotations

import logging
import threading
import time

from .errors import SplitRankError
from .latency import summarize
from .wire import Client

logger = logging.getLogger(__name__)

MIN_SAMPLES = 1000


class BenchError(SplitRankError):
    code = "bench"


def bench(target, requests, concurrency=1, duration=10.0, *, warmup=0, on_reply=None) -> dict:
    """Replay ``requests`` round-robin from ``concurrency`` workers for ``duration`` seconds.

    ``target`` is a ``host:port`` string or any object with ``request(dict)``.
    Latencies are wall-clock per request in milliseconds; phase timings found
    in ``trace``/``timing`` of the responses are summarised too.
    ``on_reply(request, reply)`` is called from the worker thread after
    every successful request.
    """
    requests = list(requests)
    if not requests:
        raise BenchError("no requests to replay")
    if concurrency < 1:
        raise BenchError("concurrency must be >= 1")
    client = Client(target, timeout=10.0) if isinstance(target, str) else target
    try:
        client.request(requests[0])
    except OSError as exc:
        raise BenchError(f"target {target} unreachable: {exc}") from exc
    for i in range(warmup):
        client.request(requests[i % len(requests)])

    latencies: list[float] = []
    phases: dict[str, list[float]] = {}
    errors = [0]
    lock = threading.Lock()
    counter = [0]
    stop_at = time.perf_counter() + duration

    def worker():
        local_lat, local_phase, local_err = [], {}, 0
        while True:
            with lock:
                i = counter[0]
                counter[0] += 1
            t0 = time.perf_counter()
            if t0 >= stop_at:
                break
            try:
                req = requests[i % len(requests)]
                reply = client.request(req)
                ok = reply.get("type") != "error"
            except Exception as exc:
                logger.debug("request failed: %r", exc)
                reply, ok = {}, False
            local_lat.append((time.perf_counter() - t0) * 1000)
            if ok and on_reply is not None:
                on_reply(req, reply)
            if not ok:
                local_err += 1
            for key in ("trace", "timing"):
                for phase, v in (reply.get(key) or {}).items():
                    if isinstance(v, (int, float)):
                        local_phase.setdefault(phase, []).append(float(v))
        with lock:
            latencies.extend(local_lat)
            errors[0] += local_err
            for phase, vs in local_phase.items():
                phases.setdefault(phase, []).extend(vs)

    started = time.perf_counter()
    threads = [threading.Thread(target=worker, daemon=True) for _ in range(concurrency)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    elapsed = time.perf_counter() - started
    if not latencies:
        raise BenchError("no requests completed")
    report = {
        "samples": len(latencies),
        "errors": errors[0],
        "concurrency": concurrency,
        "duration_s": elapsed,
        "throughput_rps": len(latencies) / elapsed,
        "latency_ms": summarize(latencies),
        "phases": {p: summarize(vs) for p, vs in sorted(phases.items())},
        "sufficient_samples": len(latencies) >= MIN_SAMPLES,
        "raw_ms": latencies,
    }
    if not report["sufficient_samples"]:
        logger.warning("only %d samples; percentiles need >= %d", len(latencies), MIN_SAMPLES)
    return report
