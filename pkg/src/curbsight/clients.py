"""Clients for the detector, vision-language model and embedding services.

HTTP backends speak JSON over POST:

* detector   ``POST <base_url>`` with ``{"model", "image", "captions", "box_threshold"}``
  answering ``{"boxes": [[x0, y0, x1, y1], ...], "labels": [...], "scores": [...]}``;
  ``image`` is a base64 PNG.
* embeddings ``POST <base_url>/embeddings`` with ``{"model", "input"}`` answering
  ``{"data": [{"embedding": [...]}]}``; images go in ``input`` as a PNG data URL.
* VLM        ``POST <base_url>/chat/completions`` with a chat message list whose
  user turn holds ``image_url`` parts (crop first, scene second) followed by
  the text prompt; the answer is ``choices[0].message.content``.

Mock backends are deterministic and need no network.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field

import httpx
import numpy as np
from PIL import Image

from .geometry import BoundingBox, GeometryError

log = logging.getLogger(__name__)


class ServiceError(RuntimeError):
    pass


class TransportError(ServiceError):
    pass


class MalformedResponseError(ServiceError):
    pass


class ServiceRejected(ServiceError):
    """Non-retryable 4xx answer; the message is the service's body verbatim."""

    def __init__(self, status: int, body: str):
        super().__init__(body)
        self.status = status
        self.body = body


@dataclass(frozen=True)
class Detection:
    label: str
    confidence: float
    bbox: BoundingBox
    view_id: str = ""


@dataclass
class VlmExchange:
    images: list  # [(ref, raster)], crop first
    prompt: str
    system: str = ""
    metadata: dict = field(default_factory=dict)
    response: str = ""
    latency_ms: float = 0.0

    def check(self) -> None:
        if not self.images:
            raise ValueError("a VLM exchange needs at least one image")
        if not self.prompt or not self.prompt.strip():
            raise ValueError("empty prompt")


@dataclass(frozen=True)
class ServiceEndpoint:
    base_url: str = ""
    model_name: str = ""
    token_env: str = ""
    timeout: float = 60.0
    max_retries: int = 3
    concurrency: int = 4
    backoff: float = 0.5
    jitter_seed: int | None = None

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError(f"timeout must be > 0, got {self.timeout}")
        if self.max_retries < 0:
            raise ValueError(f"max_retries must be >= 0, got {self.max_retries}")
        if self.concurrency < 1:
            raise ValueError(f"concurrency must be >= 1, got {self.concurrency}")


def encode_png(raster: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(raster).squeeze()).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _redact(headers: dict) -> dict:
    return {k: ("***" if k.lower() == "authorization" else v) for k, v in headers.items()}


class HttpService:
    """POST JSON with bounded concurrency and exponential-backoff retries."""

    def __init__(self, endpoint: ServiceEndpoint, transport: httpx.BaseTransport | None = None,
                 sleep=time.sleep):
        self.endpoint = endpoint
        self._client = httpx.Client(timeout=endpoint.timeout, transport=transport)
        self._slots = threading.BoundedSemaphore(endpoint.concurrency)
        self._rng = random.Random(endpoint.jitter_seed)
        self._rng_lock = threading.Lock()
        self._sleep = sleep

    def _headers(self) -> dict:
        h = {"Content-Type": "application/json"}
        if self.endpoint.token_env:
            token = os.environ.get(self.endpoint.token_env)
            if token:
                h["Authorization"] = f"Bearer {token}"
        return h

    def _delay(self, attempt: int) -> float:
        with self._rng_lock:
            jitter = self._rng.random()
        return self.endpoint.backoff * (2 ** attempt) * (1.0 + 0.25 * jitter)

    def post(self, path: str, body: dict) -> dict:
        url = self.endpoint.base_url.rstrip("/") + path
        headers = self._headers()
        last = None
        for attempt in range(self.endpoint.max_retries + 1):
            if attempt:
                self._sleep(self._delay(attempt - 1))
            log.debug("POST %s headers=%s attempt=%d", url, _redact(headers), attempt)
            try:
                with self._slots:
                    resp = self._client.post(url, json=body, headers=headers)
            except httpx.HTTPError as e:
                last = TransportError(f"{url}: {e}")
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = TransportError(f"{url}: HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise ServiceRejected(resp.status_code, resp.text)
            try:
                return resp.json()
            except ValueError as e:
                raise MalformedResponseError(f"{url}: response is not JSON") from e
        raise last


# --- detector -------------------------------------------------------------

def _normalize_label(label: str, schema) -> str | None:
    if schema is None:
        return label
    return schema.canonical_category(label)


def _finish_detections(raw, vocabulary, conf_threshold, schema, view_id) -> list[Detection]:
    out = []
    for label, score, box in raw:
        if score < conf_threshold:
            continue
        name = _normalize_label(label, schema)
        if name is None:
            log.warning("dropping detection with label %r outside the schema", label)
            continue
        try:
            bbox = BoundingBox(*(float(v) for v in box)).check()
        except (GeometryError, TypeError, ValueError) as e:
            raise MalformedResponseError(f"bad detection box {box!r}: {e}") from e
        out.append(Detection(name, float(score), bbox, view_id))
    return out


class HttpDetector:
    def __init__(self, endpoint: ServiceEndpoint, schema=None, transport=None, sleep=time.sleep):
        self.service = HttpService(endpoint, transport, sleep)
        self.schema = schema

    def detect(self, image: np.ndarray, vocabulary: list[str], conf_threshold: float = 0.30,
               image_id: str = "", view_id: str = "") -> list[Detection]:
        if not vocabulary:
            raise ValueError("detector vocabulary is empty")
        body = {"model": self.service.endpoint.model_name, "image": encode_png(image),
                "captions": list(vocabulary), "box_threshold": conf_threshold}
        data = self.service.post("", body)
        try:
            boxes, labels, scores = data["boxes"], data["labels"], data["scores"]
            if not len(boxes) == len(labels) == len(scores):
                raise ValueError("boxes/labels/scores length mismatch")
            raw = [(str(l), float(s), list(b)) for b, l, s in zip(boxes, labels, scores)]
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedResponseError(f"detector response: {e}") from e
        return _finish_detections(raw, vocabulary, conf_threshold, self.schema, view_id)


class MockDetector:
    """Replays fixture detections keyed by ``"<image_id>/<view_id>"``."""

    def __init__(self, fixtures: dict | str | None = None, schema=None):
        if isinstance(fixtures, (str, os.PathLike)):
            with open(fixtures, encoding="utf-8") as fh:
                fixtures = json.load(fh)
        self.fixtures = fixtures or {}
        self.schema = schema

    def detect(self, image, vocabulary, conf_threshold: float = 0.30, image_id: str = "",
               view_id: str = "") -> list[Detection]:
        if not vocabulary:
            raise ValueError("detector vocabulary is empty")
        key = f"{image_id}/{view_id}" if view_id else image_id
        raw = [(d["label"], float(d["score"]), d["bbox"]) for d in self.fixtures.get(key, [])]
        return _finish_detections(raw, vocabulary, conf_threshold, self.schema, view_id)


# --- embedders ------------------------------------------------------------

def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise MalformedResponseError("embedding has zero norm")
    return v / n


class HttpEmbedder:
    def __init__(self, endpoint: ServiceEndpoint, dim: int | None = None, transport=None,
                 sleep=time.sleep):
        self.service = HttpService(endpoint, transport, sleep)
        self.dim = dim

    def _embed(self, payload: str) -> np.ndarray:
        data = self.service.post("/embeddings", {"model": self.service.endpoint.model_name,
                                                 "input": payload})
        try:
            v = np.asarray(data["data"][0]["embedding"], dtype=np.float64)
        except (KeyError, IndexError, TypeError, ValueError) as e:
            raise MalformedResponseError(f"embedding response: {e}") from e
        if v.ndim != 1 or (self.dim is not None and v.size != self.dim):
            raise MalformedResponseError(f"embedding has shape {v.shape}, expected ({self.dim},)")
        return _unit(v)

    def embed_text(self, body: str) -> np.ndarray:
        if not body:
            raise ValueError("empty text")
        return self._embed(body)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        if image.size == 0:
            raise ValueError("empty image")
        return self._embed("data:image/png;base64," + encode_png(image))


_TOKEN = re.compile(r"\w+", re.UNICODE)


class MockEmbedder:
    """Hashed bag-of-features embedder folded into ``dim`` and normalized.

    The vector is a function of the input bytes only, so it is stable across
    processes and platforms.
    """

    def __init__(self, dim: int = 64):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = dim

    def _fold(self, features) -> np.ndarray:
        v = np.zeros(self.dim)
        for feat, weight in features:
            h = int.from_bytes(hashlib.blake2b(feat.encode("utf-8"), digest_size=8).digest(), "big")
            v[h % self.dim] += weight if (h >> 40) & 1 else -weight
        if not v.any():
            v[0] = 1.0
        return _unit(v)

    def embed_text(self, body: str) -> np.ndarray:
        if not body:
            raise ValueError("empty text")
        toks = _TOKEN.findall(body.casefold())
        feats = [(f"w:{t}", 1.0) for t in toks]
        feats += [(f"b:{a} {b}", 0.5) for a, b in zip(toks, toks[1:])]
        if not feats:
            feats = [(f"c:{ch}", 1.0) for ch in body]
        return self._fold(feats)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image)
        if img.size == 0:
            raise ValueError("empty image")
        if img.ndim == 2:
            img = img[:, :, None]
        img = img[:, :, :3].astype(np.float64)
        feats = []
        rows = np.array_split(np.arange(img.shape[0]), min(4, img.shape[0]))
        cols = np.array_split(np.arange(img.shape[1]), min(4, img.shape[1]))
        for i, r in enumerate(rows):
            for j, c in enumerate(cols):
                cell = img[r[0]:r[-1] + 1, c[0]:c[-1] + 1].reshape(-1, img.shape[2]).mean(axis=0)
                for ch, val in enumerate(cell):
                    feats.append((f"g{i}{j}c{ch}q{int(val) // 32}", 1.0))
        q = (img.reshape(-1, img.shape[2]) // 64).astype(int)
        codes, counts = np.unique(q, axis=0, return_counts=True)
        for code, cnt in zip(codes, counts):
            feats.append(("h" + "".join(map(str, code)), 16.0 * cnt / q.shape[0]))
        return self._fold(feats)


# --- vision-language model ------------------------------------------------

class HttpVlm:
    def __init__(self, endpoint: ServiceEndpoint, transport=None, sleep=time.sleep,
                 temperature: float = 0.0):
        self.service = HttpService(endpoint, transport, sleep)
        self.temperature = temperature

    def complete_multimodal(self, exchange: VlmExchange) -> str:
        exchange.check()
        parts = [{"type": "image_url", "image_url": {"url": "data:image/png;base64," + encode_png(img)}}
                 for _, img in exchange.images]
        parts.append({"type": "text", "text": exchange.prompt})
        messages = []
        if exchange.system:
            messages.append({"role": "system", "content": exchange.system})
        messages.append({"role": "user", "content": parts})
        body = {"model": self.service.endpoint.model_name, "messages": messages,
                "temperature": self.temperature}
        t0 = time.perf_counter()
        data = self.service.post("/chat/completions", body)
        exchange.latency_ms = (time.perf_counter() - t0) * 1000.0
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as e:
            raise MalformedResponseError(f"chat response: {e}") from e
        if not isinstance(text, str):
            raise MalformedResponseError("chat response content is not text")
        exchange.response = text
        return text


_STYLES = {
    "plain": "{json}",
    "fenced": "Here is the structured description.\n```json\n{json}\n```",
    "prose": "Based on the crop and the scene, the object is described by {json} as requested.",
}


class MockVlm:
    """Deterministic VLM stand-in.

    Modes: ``fixture`` answers from per-object fixtures (falling back to the
    top exemplar precedent in the exchange metadata), ``malformed`` answers
    prose without braces, ``echo`` returns the prompt.
    """

    def __init__(self, mode: str = "fixture", fixtures: dict | str | None = None,
                 style: str = "fenced"):
        if mode not in ("fixture", "malformed", "echo"):
            raise ValueError(f"unknown mock VLM mode {mode!r}")
        if style not in _STYLES:
            raise ValueError(f"unknown response style {style!r}")
        if isinstance(fixtures, (str, os.PathLike)):
            with open(fixtures, encoding="utf-8") as fh:
                fixtures = json.load(fh)
        self.mode = mode
        self.fixtures = fixtures or {}
        self.style = style

    def complete_multimodal(self, exchange: VlmExchange) -> str:
        exchange.check()
        if self.mode == "echo":
            text = exchange.prompt
        elif self.mode == "malformed":
            text = "I cannot determine the attributes of this object from the image."
        else:
            meta = exchange.metadata
            answer = self.fixtures.get(meta.get("object_id", ""))
            if answer is None:
                attrs = {}
                precedents = meta.get("precedents") or []
                if precedents:
                    attrs = {k: {"value": v, "confidence": 0.5} for k, v in precedents[0]}
                answer = {"category": meta.get("category", ""), "attributes": attrs}
            text = _STYLES[self.style].format(json=json.dumps(answer, ensure_ascii=False))
        exchange.response = text
        return text
