"""Local HTTP server speaking the three remote protocols with oracle answers.

Routes (all ``POST``, JSON in and out)::

    /qa       {"prompt": str}                      -> {"pairs": [{"question", "answer", "category"}]}
    /vqa      {"image": b64png, "questions": [str]} -> {"answers": [str]}
    /segment  {"image": b64png}                     -> {"masks": [b64png]}

A fault prefix exercises client error handling: ``/slow/<route>`` sleeps
past the client timeout, ``/malformed/<route>`` answers 200 with a body that
is not JSON, ``/incomplete/<route>`` drops the required field, ``/error/<route>``
always answers 503, and ``/flaky/<route>`` answers 503 to the first request
and then recovers.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from ..editor import OracleSegmenter
from ..errors import CompalignError
from ..qa import generate_qa_from_prompt
from ..remote import decode_image, encode_image
from ..vqa import oracle_answer

log = logging.getLogger(__name__)
FAULTS = ("slow", "malformed", "incomplete", "error", "flaky")


def handle_qa(body: dict) -> dict:
    pairs = generate_qa_from_prompt(body["prompt"])
    return {"pairs": [{"question": p.question, "answer": p.expected_answer, "category": p.category} for p in pairs]}


def handle_vqa(body: dict) -> dict:
    image = decode_image(body["image"])
    return {"answers": list(oracle_answer(image, body["questions"]).answers)}


def handle_segment(body: dict) -> dict:
    seg = OracleSegmenter().segment(decode_image(body["image"]))
    return {"masks": [encode_image(m) for m in seg.masks]}


ROUTES = {"qa": (handle_qa, "pairs"), "vqa": (handle_vqa, "answers"), "segment": (handle_segment, "masks")}


class _Handler(BaseHTTPRequestHandler):
    server: "StubHTTPServer"

    def log_message(self, fmt, *args):
        log.debug("stub: " + fmt, *args)

    def _send(self, status: int, body: bytes, ctype="application/json; charset=utf-8"):
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self):
        parts = [p for p in self.path.split("?")[0].split("/") if p]
        fault = parts[0] if len(parts) == 2 and parts[0] in FAULTS else None
        route = parts[-1] if parts else ""
        if route not in ROUTES or len(parts) > 2 or (len(parts) == 2 and fault is None):
            self._send(404, b'{"error": "no such route"}')
            return
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length)
        count = self.server.count(self.path)
        if fault == "error" or (fault == "flaky" and count == 1):
            self._send(503, b'{"error": "unavailable"}')
            return
        if fault == "slow":
            time.sleep(self.server.slow_seconds)
        if fault == "malformed":
            self._send(200, b"<html>not json</html>", "text/html")
            return
        try:
            body = json.loads(raw.decode("utf-8"))
            handler, key = ROUTES[route]
            payload = handler(body)
        except (KeyError, TypeError, ValueError, CompalignError) as exc:
            self._send(400, json.dumps({"error": str(exc)}).encode("utf-8"))
            return
        if fault == "incomplete":
            payload.pop(key)
        self._send(200, json.dumps(payload).encode("utf-8"))


class StubHTTPServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address=("127.0.0.1", 0), slow_seconds: float = 2.0):
        super().__init__(address, _Handler)
        self.slow_seconds = slow_seconds
        self._counts: dict = {}
        self._lock = threading.Lock()

    def count(self, path: str) -> int:
        with self._lock:
            self._counts[path] = self._counts.get(path, 0) + 1
            return self._counts[path]

    def requests_for(self, path: str) -> int:
        with self._lock:
            return self._counts.get(path, 0)

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"


class StubServer:
    """Context manager running :class:`StubHTTPServer` on a background thread."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0, slow_seconds: float = 2.0):
        self.httpd = StubHTTPServer((host, port), slow_seconds)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        return self.httpd.url

    def __enter__(self) -> "StubServer":
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()
        self.thread.join(timeout=5)
