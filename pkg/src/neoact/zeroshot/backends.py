"""Inference backends: a scripted deterministic mock and a JSON-over-HTTP client."""

from __future__ import annotations

import base64
import hashlib
import io
import json
import os
import threading
import time
from dataclasses import dataclass, field

import numpy as np


class TransportError(RuntimeError):
    """The backend could not produce a response (after retries, if any)."""


class TransportTimeout(TransportError):
    pass


class UnscriptedRequest(KeyError):
    """The mock has no scripted response for a request."""


@dataclass(frozen=True)
class Request:
    clip_id: str
    purpose: str                 # "co", "question:<label>", "caption", "judge:<label>", "judge-retry:<label>"
    messages: tuple              # ((role, content), ...)
    model: str = "mock"
    temperature: float = 0.0
    frames: np.ndarray | None = field(default=None, compare=False, repr=False)

    def frames_digest(self) -> str | None:
        if self.frames is None:
            return None
        arr = np.ascontiguousarray(self.frames, dtype=np.float32)
        return hashlib.sha256(str(arr.shape).encode() + arr.tobytes()).hexdigest()

    def canonical(self) -> dict:
        return {"clip_id": self.clip_id, "purpose": self.purpose, "model": self.model,
                "temperature": self.temperature,
                "messages": [{"role": r, "content": c} for r, c in self.messages],
                "frames_sha256": self.frames_digest()}

    def fingerprint(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def alias(self) -> str:
        return f"{self.clip_id}::{self.purpose}"


@dataclass(frozen=True)
class Response:
    text: str
    latency_s: float


@dataclass
class BackendEndpoint:
    kind: str                     # mock | http
    address: str = ""
    timeout_s: float = 30.0
    max_retries: int = 2

    def __post_init__(self):
        if self.kind not in ("mock", "http"):
            raise ValueError(f"backend kind must be mock or http, got {self.kind!r}")
        if self.max_retries < 0 or self.timeout_s <= 0:
            raise ValueError("max_retries must be >= 0 and timeout_s > 0")


class MockBackend:
    """Responses come from ``script``, keyed by request fingerprint or ``clip_id::purpose``.

    A value is either a string or a list of strings consumed by successive
    attempts of the same request (the last one repeats).  Directives:
    ``"!timeout"`` raises :class:`TransportTimeout`, ``"!error <msg>"``
    raises :class:`TransportError`.  Latencies are a pure function of
    ``(seed, fingerprint, attempt)``; nothing sleeps.
    """

    def __init__(self, script: dict, seed: int = 0, endpoint: BackendEndpoint | None = None):
        self.script = dict(script)
        self.seed = seed
        self.endpoint = endpoint or BackendEndpoint("mock")
        self.calls: list[Request] = []
        self._attempts: dict[str, int] = {}
        self._lock = threading.Lock()

    def _lookup(self, req: Request):
        fp = req.fingerprint()
        if fp in self.script:
            return fp, self.script[fp]
        if req.alias in self.script:
            return fp, self.script[req.alias]
        raise UnscriptedRequest(f"no scripted response for {req.alias} ({fp[:12]})")

    def latency(self, fp: str, attempt: int) -> float:
        h = hashlib.sha256(f"{self.seed}:{fp}:{attempt}".encode()).digest()
        return 0.05 + int.from_bytes(h[:4], "little") / 2 ** 32 * 0.45

    def complete(self, req: Request) -> Response:
        fp, value = self._lookup(req)
        with self._lock:
            attempt = self._attempts.get(fp, 0)
            self._attempts[fp] = attempt + 1
            self.calls.append(req)
        if isinstance(value, (list, tuple)):
            if not value:
                raise UnscriptedRequest(f"empty response list for {req.alias}")
            value = value[min(attempt, len(value) - 1)]
        if not isinstance(value, str):
            raise TypeError(f"scripted response for {req.alias} must be a string")
        if value == "!timeout":
            raise TransportTimeout(f"scripted timeout for {req.alias}")
        if value.startswith("!error"):
            raise TransportError(value[len("!error"):].strip() or f"scripted error for {req.alias}")
        return Response(value, self.latency(fp, attempt))


def encode_frames(frames: np.ndarray) -> list[str]:
    """Base64 PNGs of ``(T, H, W, 3)`` frames in ``[0, 1]``."""
    from PIL import Image

    out = []
    for f in np.asarray(frames):
        img = Image.fromarray(np.clip(np.rint(f * 255), 0, 255).astype(np.uint8), "RGB")
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        out.append(base64.b64encode(buf.getvalue()).decode("ascii"))
    return out


class HttpBackend:
    """POST ``{model, messages, temperature, frames}`` to ``address``; expects ``{"text": ...}`` back.

    ``NEOACT_BACKEND_URL`` and ``NEOACT_BACKEND_TIMEOUT`` override the
    endpoint's address and timeout.
    """

    def __init__(self, endpoint: BackendEndpoint, session=None):
        import requests

        self._requests = requests
        self.endpoint = endpoint
        self.address = os.environ.get("NEOACT_BACKEND_URL", endpoint.address)
        self.timeout_s = float(os.environ.get("NEOACT_BACKEND_TIMEOUT", endpoint.timeout_s))
        if not self.address:
            raise ValueError("http backend needs an address")
        self.session = session or requests.Session()

    def payload(self, req: Request) -> dict:
        return {"model": req.model, "temperature": req.temperature,
                "messages": [{"role": r, "content": c} for r, c in req.messages],
                "frames": encode_frames(req.frames) if req.frames is not None else []}

    def complete(self, req: Request) -> Response:
        t0 = time.perf_counter()
        try:
            r = self.session.post(self.address, json=self.payload(req), timeout=self.timeout_s)
        except self._requests.Timeout as exc:
            raise TransportTimeout(str(exc)) from exc
        except self._requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        if r.status_code >= 500:
            raise TransportError(f"HTTP {r.status_code} from {self.address}")
        if r.status_code >= 400:
            raise TransportError(f"HTTP {r.status_code} from {self.address}: {r.text[:200]}")
        try:
            text = r.json()["text"]
        except (ValueError, KeyError, TypeError) as exc:
            raise TransportError(f"malformed response body from {self.address}") from exc
        return Response(str(text), time.perf_counter() - t0)


def make_backend(endpoint: BackendEndpoint, script: dict | None = None, seed: int = 0):
    if endpoint.kind == "mock":
        return MockBackend(script or {}, seed=seed, endpoint=endpoint)
    return HttpBackend(endpoint)
