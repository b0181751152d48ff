"""Scoring over a JSON protocol.

Request::

    {"op": "quality" | "fidelity" | "compare" | "score",
     "mode": "FR" | "NR",                      # "score" only
     "items": [{"index": i, "sr": <img>, "ref": <img>?, "other": <img>?}, ...]}

Images travel as ``{"dtype": "<f8", "shape": [...], "data": <base64>}``.
The response is ``{"results": [{"index": i, "Q": q, "F": f?, "outcome": o?}, ...]}``
in any order; the client reassembles by ``index``.
"""

from __future__ import annotations

import base64
import json
import random
import threading
import time
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Sequence

import numpy as np

from flowsr.data import upsample
from flowsr.reward import ProxyScorers, ScorerInterface


class RemoteScoringError(RuntimeError):
    pass


def encode_image(x: np.ndarray, dtype: str = "<f8") -> dict:
    a = np.ascontiguousarray(x, dtype=np.dtype(dtype))
    return {"dtype": dtype, "shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_image(p: dict) -> np.ndarray:
    raw = base64.b64decode(p["data"])
    return np.frombuffer(raw, dtype=np.dtype(p["dtype"])).reshape(p["shape"]).astype(np.float64)


class ScoringServer:
    """Answers protocol requests with a local scorer."""

    def __init__(self, scorers: ScorerInterface | None = None, factor: int = 4):
        self.scorers = scorers or ProxyScorers()
        self.factor = factor

    def _one(self, op, mode, item):
        sr = decode_image(item["sr"])
        out = {"index": item["index"]}
        if op == "quality":
            out["Q"] = float(self.scorers.quality(sr))
        elif op == "fidelity":
            out["F"] = float(self.scorers.fidelity(sr, decode_image(item["ref"])))
        elif op == "compare":
            out["outcome"] = self.scorers.compare(sr, decode_image(item["other"]))
        elif op == "score":
            ref = decode_image(item["ref"])
            if mode == "NR":
                ref = upsample(ref, self.factor)
            elif mode != "FR":
                raise ValueError(f"unknown mode {mode!r}")
            out["F"] = float(self.scorers.fidelity(sr, ref))
            out["Q"] = float(self.scorers.quality(sr))
        else:
            raise ValueError(f"unknown op {op!r}")
        return out

    def handle(self, request: dict) -> dict:
        op, mode = request.get("op"), request.get("mode")
        try:
            return {"results": [self._one(op, mode, it) for it in request["items"]]}
        except (KeyError, ValueError, TypeError) as e:
            return {"error": f"{type(e).__name__}: {e}"}


class LoopbackTransport:
    """In-process transport that still round-trips through JSON.

    ``shuffle`` returns results out of order; ``fail_first`` makes the first
    n calls time out (for retry tests).
    """

    def __init__(self, server: ScoringServer, shuffle: bool = False, fail_first: int = 0, seed: int = 0):
        self.server = server
        self.shuffle = shuffle
        self.fail_first = fail_first
        self.calls = 0
        self._rng = random.Random(seed)

    def __call__(self, request: dict, timeout: float) -> dict:
        self.calls += 1
        if self.calls <= self.fail_first:
            raise TimeoutError("simulated timeout")
        resp = self.server.handle(json.loads(json.dumps(request)))
        if self.shuffle and "results" in resp:
            self._rng.shuffle(resp["results"])
        return json.loads(json.dumps(resp))


class HttpTransport:
    def __init__(self, url: str):
        self.url = url

    def __call__(self, request: dict, timeout: float) -> dict:
        body = json.dumps(request).encode()
        req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
        with urllib.request.urlopen(req, timeout=timeout) as r:
            return json.loads(r.read())


def serve_http(server: ScoringServer, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Start a background HTTP scoring endpoint; ``shutdown()`` stops it."""

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            n = int(self.headers.get("Content-Length", 0))
            try:
                resp = server.handle(json.loads(self.rfile.read(n)))
            except json.JSONDecodeError as e:
                resp = {"error": f"bad json: {e}"}
            data = json.dumps(resp).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, *args):
            pass

    httpd = ThreadingHTTPServer((host, port), Handler)
    threading.Thread(target=httpd.serve_forever, daemon=True).start()
    return httpd


class RemoteScorers:
    """ScorerInterface backed by a remote endpoint, with timeout and retries."""

    def __init__(self, transport, timeout: float = 30.0, retries: int = 3, backoff: float = 0.05):
        self.transport = transport
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def _call(self, request: dict, n: int) -> list[dict]:
        last = None
        for attempt in range(self.retries + 1):
            try:
                resp = self.transport(request, self.timeout)
            except (TimeoutError, OSError, urllib.error.URLError) as e:
                last = e
                time.sleep(self.backoff * attempt)
                continue
            if "error" in resp:
                raise RemoteScoringError(f"scorer rejected {request['op']} request: {resp['error']}")
            by_idx = {r["index"]: r for r in resp["results"]}
            if sorted(by_idx) != list(range(n)):
                raise RemoteScoringError(f"response indices {sorted(by_idx)} do not cover 0..{n - 1}")
            return [by_idx[i] for i in range(n)]
        raise RemoteScoringError(f"{request['op']} failed after {self.retries + 1} attempts: {last}")

    def quality_batch(self, images: Sequence[np.ndarray]) -> list[float]:
        items = [{"index": i, "sr": encode_image(x)} for i, x in enumerate(images)]
        return [r["Q"] for r in self._call({"op": "quality", "items": items}, len(items))]

    def score(self, srs: Sequence[np.ndarray], refs: Sequence[np.ndarray], mode: str) -> list[tuple[float, float]]:
        """(F, Q) per candidate; in NR mode ``refs`` are the LR inputs."""
        items = [{"index": i, "sr": encode_image(s), "ref": encode_image(r)} for i, (s, r) in enumerate(zip(srs, refs))]
        res = self._call({"op": "score", "mode": mode, "items": items}, len(items))
        return [(r["F"], r["Q"]) for r in res]

    def quality(self, x):
        return self.quality_batch([x])[0]

    def fidelity(self, x, ref):
        item = {"index": 0, "sr": encode_image(x), "ref": encode_image(ref)}
        return self._call({"op": "fidelity", "items": [item]}, 1)[0]["F"]

    def compare(self, a, b):
        item = {"index": 0, "sr": encode_image(a), "other": encode_image(b)}
        return self._call({"op": "compare", "items": [item]}, 1)[0]["outcome"]
