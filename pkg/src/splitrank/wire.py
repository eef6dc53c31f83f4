"""Newline-delimited JSON over TCP: a threaded server and pooled clients."""
from __future__ import annotations

import json
import logging
import queue
import socket
import socketserver
import threading

from .errors import SplitRankError

logger = logging.getLogger(__name__)


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, _, port = endpoint.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
    return host, int(port)


def encode(message: dict) -> bytes:
    return (json.dumps(message, separators=(",", ":")) + "\n").encode("utf-8")


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        while True:
            try:
                line = self.rfile.readline()
            except (ConnectionError, OSError):
                return
            if not line:
                return
            if not line.strip():
                continue
            try:
                message = json.loads(line)
                if not isinstance(message, dict):
                    raise ValueError("message must be a JSON object")
            except ValueError as exc:
                reply = {"type": "error", "code": "bad_json", "message": str(exc)}
            else:
                try:
                    reply = self.server.app(message)
                except SplitRankError as exc:
                    reply = {"type": "error", "code": exc.code, "message": str(exc)}
                except Exception as exc:  # keep the connection alive, report upstream
                    logger.exception("handler failed")
                    reply = {"type": "error", "code": "internal", "message": repr(exc)}
            try:
                self.wfile.write(encode(reply))
                self.wfile.flush()
            except (ConnectionError, OSError):
                return


class JsonLineServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, app, host="127.0.0.1", port=0):
        self.app = app
        super().__init__((host, port), _Handler)

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> JsonLineServer:
        thread = threading.Thread(target=self.serve_forever, name=f"serve-{self.endpoint}", daemon=True)
        thread.start()
        return self

    def stop(self):
        self.shutdown()
        self.server_close()


def serve(app, listen: str):
    """Block serving ``app`` (a callable dict -> dict) on ``host:port``."""
    host, port = parse_endpoint(listen)
    server = JsonLineServer(app, host, port)
    logger.info("listening on %s", server.endpoint)
    try:
        server.serve_forever()
    finally:
        server.server_close()


class Connection:
    def __init__(self, endpoint: str, timeout: float | None):
        self.sock = socket.create_connection(parse_endpoint(endpoint), timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.rfile = self.sock.makefile("rb")

    def request(self, message: dict) -> dict:
        self.sock.sendall(encode(message))
        line = self.rfile.readline()
        if not line:
            raise ConnectionError("connection closed by peer")
        return json.loads(line)

    def close(self):
        try:
            self.rfile.close()
            self.sock.close()
        except OSError:
            pass


class Client:
    """Thread-safe client keeping a small pool of persistent connections."""

    def __init__(self, endpoint: str, timeout: float | None = 5.0):
        self.endpoint = endpoint
        self.timeout = timeout
        self._idle: queue.LifoQueue[Connection] = queue.LifoQueue()

    def request(self, message: dict) -> dict:
        try:
            conn = self._idle.get_nowait()
        except queue.Empty:
            conn = Connection(self.endpoint, self.timeout)
        try:
            reply = conn.request(message)
        except BaseException:
            conn.close()
            raise
        self._idle.put(conn)
        return reply

    def close(self):
        while True:
            try:
                self._idle.get_nowait().close()
            except queue.Empty:
                return
