"""Clients for multimodal language model backends.

Every backend returns a :class:`GenerationResult` carrying the response text,
token offsets into that text and one embedding row per token. Two kinds are
provided: :class:`RemoteBackend` (JSON over HTTP) and :class:`ScriptedBackend`
(canned responses keyed by a digest of image and conversation).
"""
from __future__ import annotations

import base64
import difflib
import hashlib
import json
import os
import re
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import BackendError, ConfigurationError, InvalidSpanError, ScriptMissError

SCRIPT_VERSION = 1
CREDENTIALS_ENV = "COTSEG_BACKEND_TOKEN"

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


@dataclass(frozen=True)
class GenerationResult:
    text: str
    tokens: tuple[tuple[str, int, int], ...]
    embeddings: np.ndarray
    latency_ms: float = 0.0

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float32)
        if emb.ndim != 2:
            raise ValueError(f"embeddings must be 2-D, got {emb.shape}")
        if emb.shape[0] != len(self.tokens):
            raise ValueError(f"{len(self.tokens)} tokens but {emb.shape[0]} embedding rows")
        if self.latency_ms < 0:
            raise ValueError("latency must be non-negative")
        last = 0
        for tok, start, end in self.tokens:
            if start < last or end < start or end > len(self.text):
                raise ValueError(f"token offsets ({start}, {end}) out of order or range")
            last = end
        emb.setflags(write=False)
        object.__setattr__(self, "tokens", tuple((str(t), int(s), int(e)) for t, s, e in self.tokens))
        object.__setattr__(self, "embeddings", emb)

    @property
    def width(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def concat(cls, results: Sequence["GenerationResult"], sep: str = "\n") -> "GenerationResult":
        """Join several results into one token sequence, shifting offsets."""
        if not results:
            raise ValueError("nothing to concatenate")
        text, tokens, offset = "", [], 0
        for i, r in enumerate(results):
            if i:
                text += sep
                offset = len(text)
            tokens.extend((t, s + offset, e + offset) for t, s, e in r.tokens)
            text += r.text
        emb = np.concatenate([r.embeddings for r in results], axis=0)
        return cls(text, tuple(tokens), emb, sum(r.latency_ms for r in results))


class BackendKind(str, Enum):
    REMOTE = "remote"
    SCRIPTED = "scripted"


@dataclass(frozen=True)
class BackendDescriptor:
    kind: BackendKind
    location: str
    embedding_width: int = 64
    model: str = "mock"
    layer: str = "final"
    timeout_s: float = 60.0

    def __post_init__(self):
        object.__setattr__(self, "kind", BackendKind(self.kind))
        if int(self.embedding_width) <= 0:
            raise ConfigurationError("embedding_width must be positive")

    @classmethod
    def load(cls, path) -> "BackendDescriptor":
        path = Path(path)
        payload = json.loads(path.read_text())
        loc = payload.get("endpoint") or payload.get("script")
        if loc is None:
            raise ConfigurationError(f"{path}: descriptor needs 'endpoint' or 'script'")
        if payload.get("script") and not Path(loc).is_absolute():
            loc = str(path.parent / loc)
        return cls(
            kind=payload.get("kind", "remote" if payload.get("endpoint") else "scripted"),
            location=loc,
            embedding_width=int(payload.get("embedding_width", 64)),
            model=payload.get("model", "mock"),
            layer=payload.get("layer", "final"),
            timeout_s=float(payload.get("timeout_s", 60.0)),
        )

    def dump(self, path) -> None:
        key = "endpoint" if self.kind is BackendKind.REMOTE else "script"
        payload = {
            "kind": self.kind.value,
            key: self.location,
            "embedding_width": self.embedding_width,
            "model": self.model,
            "layer": self.layer,
            "timeout_s": self.timeout_s,
        }
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")

    def connect(self) -> "MllmBackend":
        if self.kind is BackendKind.SCRIPTED:
            return ScriptedBackend.from_file(self.location)
        return RemoteBackend(
            self.location,
            embedding_width=self.embedding_width,
            model=self.model,
            layer=self.layer,
            timeout_s=self.timeout_s,
        )


class MllmBackend(Protocol):
    embedding_width: int

    def generate(self, image, rendered_history: str, max_tokens: int = 512) -> GenerationResult: ...


def image_digest(image) -> str:
    """Stable digest of an image given as raw bytes or an array."""
    if isinstance(image, (bytes, bytearray, memoryview)):
        data = bytes(image)
    else:
        arr = np.ascontiguousarray(np.asarray(image))
        data = f"{arr.dtype.str}{arr.shape}".encode() + arr.tobytes()
    return hashlib.sha256(data).hexdigest()


def request_digest(image, rendered_history: str) -> str:
    h = hashlib.sha256()
    h.update(image_digest(image).encode())
    h.update(b"\x00")
    h.update(rendered_history.encode("utf-8"))
    return h.hexdigest()


def tokenize_with_offsets(text: str) -> tuple[tuple[str, int, int], ...]:
    """Word/punctuation tokenizer used by the scripted backend."""
    return tuple((m.group(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text))


def token_embedding(token: str, width: int) -> np.ndarray:
    """Unit-variance pseudorandom vector seeded by the token string."""
    seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(seed).standard_normal(width).astype(np.float32)


def mock_result(text: str, width: int, latency_ms: float = 0.0) -> GenerationResult:
    tokens = tokenize_with_offsets(text)
    emb = np.stack([token_embedding(t, width) for t, _, _ in tokens]) if tokens else np.zeros((0, width), np.float32)
    return GenerationResult(text, tokens, emb, latency_ms)


class ScriptedBackend:
    """Deterministic backend replaying canned responses.

    The script maps ``request_digest(image, history)`` to response text; the
    conversation text is stored next to each entry so a miss can point at the
    closest scripted request.
    """

    def __init__(self, entries: dict | None = None, embedding_width: int = 64, model: str = "mock"):
        if embedding_width <= 0:
            raise ConfigurationError("embedding_width must be positive")
        self.entries: dict[str, dict] = dict(entries or {})
        self.embedding_width = embedding_width
        self.model = model
        self.calls = 0

    def add(self, image, rendered_history: str, response: str) -> str:
        key = request_digest(image, rendered_history)
        self.entries[key] = {"history": rendered_history, "image": image_digest(image), "text": response}
        return key

    def generate(self, image, rendered_history: str, max_tokens: int = 512) -> GenerationResult:
        self.calls += 1
        key = request_digest(image, rendered_history)
        entry = self.entries.get(key)
        if entry is None:
            raise ScriptMissError(key, self._nearest(image_digest(image), rendered_history))
        return mock_result(entry["text"], self.embedding_width)

    def _nearest(self, img: str, history: str) -> str | None:
        if not self.entries:
            return None
        pool = [(k, e) for k, e in self.entries.items() if e.get("image") == img] or list(self.entries.items())
        return max(
            pool,
            key=lambda kv: difflib.SequenceMatcher(None, kv[1].get("history", ""), history, autojunk=False).quick_ratio(),
        )[0]

    def to_dict(self) -> dict:
        return {
            "version": SCRIPT_VERSION,
            "model": self.model,
            "embedding_width": self.embedding_width,
            "entries": {k: self.entries[k] for k in sorted(self.entries)},
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def from_file(cls, path) -> "ScriptedBackend":
        payload = json.loads(Path(path).read_text())
        if payload.get("version") != SCRIPT_VERSION:
            raise ConfigurationError(f"{path}: unsupported script version {payload.get('version')}")
        return cls(payload["entries"], int(payload["embedding_width"]), payload.get("model", "mock"))


class RecordingBackend:
    """Wrap a backend and capture every exchange into a script."""

    def __init__(self, inner, script: ScriptedBackend | None = None):
        self.inner = inner
        self.embedding_width = inner.embedding_width
        self.script = script or ScriptedBackend(embedding_width=inner.embedding_width)

    def generate(self, image, rendered_history: str, max_tokens: int = 512) -> GenerationResult:
        result = self.inner.generate(image, rendered_history, max_tokens)
        self.script.add(image, rendered_history, result.text)
        return result


class SequenceBackend:
    """Answer turns from a fixed list, in order. Useful to author scripts."""

    def __init__(self, responses: Sequence[str], embedding_width: int = 64):
        self.responses = list(responses)
        self.embedding_width = embedding_width
        self._i = 0

    def generate(self, image, rendered_history: str, max_tokens: int = 512) -> GenerationResult:
        if self._i >= len(self.responses):
            raise BackendError("sequence backend exhausted")
        text = self.responses[self._i]
        self._i += 1
        return mock_result(text, self.embedding_width)


def encode_image_payload(image) -> str:
    if isinstance(image, (bytes, bytearray, memoryview)):
        return base64.b64encode(bytes(image)).decode("ascii")
    import io

    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def build_request(image, rendered_history: str, max_tokens: int, layer: str = "final") -> dict:
    return {
        "image": encode_image_payload(image),
        "prompt": rendered_history,
        "max_tokens": int(max_tokens),
        "layer": layer,
    }


def encode_embeddings(emb: np.ndarray) -> dict:
    emb = np.ascontiguousarray(emb, dtype="<f4")
    return {"shape": list(emb.shape), "data": base64.b64encode(emb.tobytes()).decode("ascii")}


def decode_response(payload: dict, latency_ms: float = 0.0) -> GenerationResult:
    try:
        shape = tuple(int(s) for s in payload["embeddings"]["shape"])
        raw = base64.b64decode(payload["embeddings"]["data"])
        emb = np.frombuffer(raw, dtype="<f4").reshape(shape)
        tokens = tuple((t, int(s), int(e)) for t, s, e in payload["tokens"])
        return GenerationResult(payload["text"], tokens, emb, latency_ms)
    except (KeyError, TypeError, ValueError) as exc:
        raise BackendError(f"malformed backend response: {exc}") from exc


def encode_response(result: GenerationResult) -> dict:
    return {
        "text": result.text,
        "tokens": [list(t) for t in result.tokens],
        "embeddings": encode_embeddings(result.embeddings),
    }


class RemoteBackend:
    """JSON-over-HTTP client; one POST per conversation turn."""

    def __init__(self, endpoint: str, embedding_width: int, model: str = "remote", layer: str = "final", timeout_s: float = 60.0):
        self.endpoint = endpoint
        self.embedding_width = embedding_width
        self.model = model
        self.layer = layer
        self.timeout_s = timeout_s

    def generate(self, image, rendered_history: str, max_tokens: int = 512) -> GenerationResult:
        body = json.dumps(build_request(image, rendered_history, max_tokens, self.layer)).encode()
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(CREDENTIALS_ENV)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        t0 = time.perf_counter()
        try:
            with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                payload = json.loads(resp.read())
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise BackendError(f"{self.endpoint}: {exc}") from exc
        result = decode_response(payload, (time.perf_counter() - t0) * 1000.0)
        if result.width != self.embedding_width:
            raise BackendError(f"backend returned width {result.width}, expected {self.embedding_width}")
        return result


def slice_embeddings(result: GenerationResult, spans: Sequence[tuple[int, int]]) -> np.ndarray:
    """Row-concatenate the embedding rows covered by half-open ``spans``."""
    n = len(result)
    parts = []
    for start, end in spans:
        if not (0 <= start <= end <= n):
            raise InvalidSpanError(f"span [{start}, {end}) outside 0..{n}")
        parts.append(result.embeddings[start:end])
    if not parts:
        return np.zeros((0, result.width), dtype=np.float32)
    return np.concatenate(parts, axis=0)
