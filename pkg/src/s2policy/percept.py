"""Perception backends: simulator ground truth and a remote HTTP service.

Wire protocol (JSON bodies)::

    POST /segment  {"image": <b64 PNG>, "prompt": str}
                -> {"labels": [str], "masks": [<b64 8-bit grayscale PNG>]}
    POST /depth    {"image": <b64 PNG>}
                -> {"depth": <b64 16-bit grayscale PNG>}

Mask confidence is ``value / 255``; depth is relative, so its scale is
irrelevant once normalized downstream.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable

import httpx
import numpy as np
from PIL import Image

from .errors import InvalidArgument, PerceptionError, ProtocolError, RetryableTransportError
from .fusion import SemanticMaskSet

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT_S = 10.0
DEFAULT_ATTEMPTS = 3
DEFAULT_BACKOFF_S = 0.5


def split_prompt(prompt: str) -> list[str]:
    """``"handwriting. sponge."`` -> ``["handwriting", "sponge"]``."""
    return [t.strip().lower() for t in prompt.split(".") if t.strip()]


@dataclass
class PerceptionResult:
    masks: SemanticMaskSet
    raw_depth: np.ndarray
    latency_ms: float = 0.0


# -- PNG codec ---------------------------------------------------------------


def encode_png(arr: np.ndarray) -> str:
    """Base64 PNG for a uint8 (H, W) / (H, W, 3) or uint16 (H, W) array."""
    arr = np.ascontiguousarray(arr)
    if arr.dtype == np.uint16:
        img = Image.fromarray(arr.astype("<u2"))  # mode I;16
    elif arr.dtype == np.uint8:
        img = Image.fromarray(arr)
    else:
        raise InvalidArgument(f"cannot PNG-encode dtype {arr.dtype}")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png(b64: str) -> np.ndarray:
    try:
        img = Image.open(io.BytesIO(base64.b64decode(b64, validate=True)))
        img.load()
    except Exception as exc:  # noqa: BLE001 - any decoder failure is a protocol problem
        raise ProtocolError(f"undecodable PNG payload: {exc}") from exc
    if img.mode in ("I;16", "I;16B", "I;16L", "I"):
        return np.asarray(img).astype(np.uint16)
    return np.asarray(img)


def quantize_mask(mask: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(mask, 0.0, 1.0) * 255.0).astype(np.uint8)


def quantize_depth(depth: np.ndarray) -> np.ndarray:
    """Min-max stretch relative depth to the full 16-bit range."""
    d = np.asarray(depth, dtype=np.float64)
    lo, hi = float(d.min()), float(d.max())
    scale = 65535.0 / (hi - lo) if hi - lo > 0 else 0.0
    return np.rint((d - lo) * scale).astype(np.uint16)


# -- backends ----------------------------------------------------------------


class OracleBackend:
    """Ground truth from a simulator environment; the RGB frame is ignored.

    ``source`` is an environment exposing ``ground_truth_perception(prompt)``.
    """

    name = "oracle"

    def __init__(self, source):
        self.source = source

    def perceive(self, rgb: np.ndarray, prompt: str) -> PerceptionResult:
        return self.source.ground_truth_perception(prompt)


class RemoteBackend:
    """Client for an external segmentation/depth service.

    5xx responses and timeouts are retried with exponential backoff; 4xx
    and malformed bodies raise :class:`ProtocolError` immediately. Results
    are cached by (frame hash, prompt).
    """

    name = "remote"

    def __init__(
        self,
        base_url: str,
        timeout: float = DEFAULT_TIMEOUT_S,
        attempts: int = DEFAULT_ATTEMPTS,
        backoff: float = DEFAULT_BACKOFF_S,
        sleep: Callable[[float], None] = time.sleep,
        transport: httpx.BaseTransport | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.attempts = attempts
        self.backoff = backoff
        self._sleep = sleep
        self._client = httpx.Client(base_url=self.base_url, timeout=timeout, transport=transport)
        self._request_lock = threading.Lock()
        self._cache: dict[tuple[str, str], PerceptionResult] = {}
        self._cache_lock = threading.RLock()

    def close(self) -> None:
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _post(self, path: str, payload: dict) -> dict:
        delay = self.backoff
        last: Exception | None = None
        for attempt in range(1, self.attempts + 1):
            try:
                with self._request_lock:
                    resp = self._client.post(path, json=payload)
            except httpx.TimeoutException as exc:
                last = RetryableTransportError(f"{path}: timeout on attempt {attempt}")
                last.__cause__ = exc
            except httpx.TransportError as exc:
                last = RetryableTransportError(f"{path}: transport failure on attempt {attempt}: {exc}")
                last.__cause__ = exc
            else:
                if 400 <= resp.status_code < 500:
                    raise ProtocolError(f"{path}: HTTP {resp.status_code}: {resp.text[:200]}")
                if resp.status_code >= 500:
                    last = RetryableTransportError(f"{path}: HTTP {resp.status_code} on attempt {attempt}")
                else:
                    try:
                        return resp.json()
                    except json.JSONDecodeError as exc:
                        raise ProtocolError(f"{path}: response is not JSON") from exc
            if attempt < self.attempts:
                log.warning("%s; retrying in %.2fs", last, delay)
                self._sleep(delay)
                delay *= 2
        raise last

    def segment(self, rgb: np.ndarray, prompt: str) -> SemanticMaskSet:
        body = self._post("/segment", {"image": encode_png(rgb), "prompt": prompt})
        try:
            labels, masks = body["labels"], body["masks"]
        except (KeyError, TypeError) as exc:
            raise ProtocolError(f"/segment response missing field: {exc}") from exc
        if not isinstance(labels, list) or not isinstance(masks, list) or len(labels) != len(masks):
            raise ProtocolError("/segment labels and masks must be lists of equal length")
        h, w = rgb.shape[:2]
        decoded = []
        for m in masks:
            arr = decode_png(m)
            if arr.shape != (h, w) or arr.dtype != np.uint8:
                raise ProtocolError(f"mask has shape {arr.shape} dtype {arr.dtype}; expected ({h}, {w}) uint8")
            decoded.append(arr.astype(np.float32) / 255.0)
        stack = np.stack(decoded) if decoded else np.zeros((0, h, w), np.float32)
        return SemanticMaskSet(stack, [str(x) for x in labels], h, w)

    def depth(self, rgb: np.ndarray) -> np.ndarray:
        body = self._post("/depth", {"image": encode_png(rgb)})
        if not isinstance(body, dict) or "depth" not in body:
            raise ProtocolError("/depth response missing 'depth'")
        arr = decode_png(body["depth"])
        if arr.shape != rgb.shape[:2]:
            raise ProtocolError(f"depth has shape {arr.shape}; expected {rgb.shape[:2]}")
        return arr.astype(np.float32) / 65535.0

    def perceive(self, rgb: np.ndarray, prompt: str) -> PerceptionResult:
        key = (hashlib.sha256(np.ascontiguousarray(rgb).tobytes()).hexdigest(), prompt)
        with self._cache_lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        t0 = time.perf_counter()
        masks = self.segment(rgb, prompt)
        depth = self.depth(rgb)
        result = PerceptionResult(masks, depth, (time.perf_counter() - t0) * 1000.0)
        with self._cache_lock:
            self._cache[key] = result
        return result


def perceive(backend, rgb: np.ndarray, prompt: str) -> PerceptionResult:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise InvalidArgument(f"rgb must be (H, W, 3), got {rgb.shape}")
    if not split_prompt(prompt):
        raise InvalidArgument("prompt has no terms")
    try:
        return backend.perceive(rgb, prompt)
    except PerceptionError:
        raise
    except Exception as exc:  # noqa: BLE001
        raise PerceptionError(f"{getattr(backend, 'name', 'backend')} perception failed: {exc}") from exc


# -- mock service ------------------------------------------------------------


@dataclass
class Fixture:
    """Canned perception output served for every request."""

    labels: list[str]
    masks: np.ndarray  # (n, H, W) uint8
    depth: np.ndarray  # (H, W) uint16

    @classmethod
    def from_result(cls, result: PerceptionResult) -> "Fixture":
        return cls(list(result.masks.labels), quantize_mask(result.masks.masks), quantize_depth(result.raw_depth))

    def segment_body(self, prompt: str) -> dict:
        return {"labels": self.labels, "masks": [encode_png(m) for m in self.masks]}

    def depth_body(self) -> dict:
        return {"depth": encode_png(self.depth)}

    def save(self, path) -> None:
        np.savez(path, labels=np.array(self.labels, dtype=str), masks=self.masks, depth=self.depth)

    @classmethod
    def load(cls, path) -> "Fixture":
        with np.load(path) as z:
            return cls([str(x) for x in z["labels"]], z["masks"].astype(np.uint8), z["depth"].astype(np.uint16))


class MockPerceptionServer:
    """Threaded HTTP server speaking the perception protocol with fixture responses.

    ``fail_next`` injects that many HTTP 503 responses before serving normally.
    """

    def __init__(self, fixture: Fixture, host: str = "127.0.0.1", port: int = 0):
        self.fixture = fixture
        self.fail_next = 0
        self.requests: list[tuple[str, float]] = []
        self._lock = threading.Lock()
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):
                log.debug("mock-perception: " + fmt, *args)

            def _reply(self, code: int, body: dict | str) -> None:
                raw = (json.dumps(body) if isinstance(body, dict) else body).encode()
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(raw)))
                self.end_headers()
                self.wfile.write(raw)

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                try:
                    payload = json.loads(self.rfile.read(length) or b"{}")
                except json.JSONDecodeError:
                    return self._reply(400, {"error": "body is not JSON"})
                with server._lock:
                    server.requests.append((self.path, time.monotonic()))
                    if server.fail_next > 0:
                        server.fail_next -= 1
                        return self._reply(503, {"error": "injected failure"})
                if not isinstance(payload, dict) or "image" not in payload:
                    return self._reply(400, {"error": "missing image"})
                if self.path == "/segment":
                    if "prompt" not in payload:
                        return self._reply(400, {"error": "missing prompt"})
                    return self._reply(200, server.fixture.segment_body(payload["prompt"]))
                if self.path == "/depth":
                    return self._reply(200, server.fixture.depth_body())
                return self._reply(404, {"error": f"no route {self.path}"})

        self._httpd = ThreadingHTTPServer((host, port), Handler)
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "MockPerceptionServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
