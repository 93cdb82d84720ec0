"""Provider-agnostic chat/embedding access with record-replay support.

Backends implement ``chat`` and ``embed``. The Gateway adds retries with
exponential backoff and a bounded-concurrency batch dispatcher that
reassembles responses in request order.

Cassette files are JSONL; the key is a sha256 over the canonicalized
request fields, stable across processes, so replay runs are byte-exact.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .errors import BackendError, CassetteMissError, ParseError


@dataclass(frozen=True)
class ChatRequest:
    model: str
    system_prompt: str
    user_prompt: str
    temperature: float = 0.0
    max_output_tokens: int = 4096
    want_logprobs: bool = False
    response_shape: str = "json_object"  # or "free_text"

    def __post_init__(self):
        if not self.system_prompt or not self.user_prompt:
            raise ValueError("prompts must be nonempty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass
class ChatResponse:
    text: str
    token_logprobs: Optional[list[tuple[str, float]]] = None
    usage: tuple[int, int] = (0, 0)
    latency_ms: int = 0


def request_hash(req: ChatRequest) -> str:
    canonical = json.dumps(
        {
            "model": req.model,
            "system_prompt": req.system_prompt,
            "user_prompt": req.user_prompt,
            "temperature": req.temperature,
            "response_shape": req.response_shape,
        },
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def embed_hash(model: str, texts: Sequence[str]) -> str:
    canonical = json.dumps({"embed_model": model, "texts": list(texts)}, sort_keys=True,
                           ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class Backend(Protocol):
    deterministic: bool

    def chat(self, req: ChatRequest) -> ChatResponse: ...

    def embed(self, texts: Sequence[str], model: str) -> list[list[float]]: ...


def _normalize(vecs: np.ndarray) -> list[list[float]]:
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return (vecs / norms).tolist()


def hash_embedding(text: str, dim: int = 64) -> list[float]:
    """Deterministic pseudo-embedding: sha256-seeded gaussian projection."""
    seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    return (v / np.linalg.norm(v)).tolist()


class RuleBackend:
    """Deterministic test/offline backend driven by a plain function."""

    deterministic = True

    def __init__(self, rule: Callable[[ChatRequest], str], embed_dim: int = 64):
        self.rule = rule
        self.embed_dim = embed_dim
        self.calls: list[ChatRequest] = []
        self._lock = threading.Lock()
        self.max_in_flight = 0
        self._in_flight = 0

    def chat(self, req: ChatRequest) -> ChatResponse:
        with self._lock:
            self.calls.append(req)
            self._in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self._in_flight)
        try:
            text = self.rule(req)
        finally:
            with self._lock:
                self._in_flight -= 1
        return ChatResponse(text=text, usage=(len(req.user_prompt.split()), len(text.split())))

    def embed(self, texts: Sequence[str], model: str) -> list[list[float]]:
        if not texts:
            raise BackendError("embed requires nonempty texts")
        return [hash_embedding(t, self.embed_dim) for t in texts]


class ReplayBackend:
    """Read-only strict cassette playback."""

    deterministic = True

    def __init__(self, cassette_path: str | Path, strict: bool = True):
        self.path = Path(cassette_path)
        self.strict = strict
        self._records: dict[str, dict] = {}
        if self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._records[rec["hash"]] = rec
        elif strict:
            raise CassetteMissError(f"cassette not found: {self.path}")

    def chat(self, req: ChatRequest) -> ChatResponse:
        h = request_hash(req)
        rec = self._records.get(h)
        if rec is None or rec.get("kind") != "chat":
            raise CassetteMissError(f"cassette miss for request {h[:12]}")
        r = rec["response"]
        lp = r.get("token_logprobs")
        return ChatResponse(
            text=r["text"],
            token_logprobs=[tuple(t) for t in lp] if lp else None,
            usage=tuple(r.get("usage", (0, 0))),
            latency_ms=0,
        )

    def embed(self, texts: Sequence[str], model: str) -> list[list[float]]:
        if not texts:
            raise BackendError("embed requires nonempty texts")
        h = embed_hash(model, texts)
        rec = self._records.get(h)
        if rec is None or rec.get("kind") != "embed":
            raise CassetteMissError(f"cassette miss for embedding {h[:12]}")
        return rec["vectors"]


class RecordingBackend:
    """Wraps another backend and appends every exchange to a cassette."""

    def __init__(self, inner: Backend, cassette_path: str | Path):
        self.inner = inner
        self.path = Path(cassette_path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.deterministic = getattr(inner, "deterministic", False)
        self._lock = threading.Lock()

    def _append(self, rec: dict) -> None:
        with self._lock:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")

    def chat(self, req: ChatRequest) -> ChatResponse:
        resp = self.inner.chat(req)
        self._append(
            {
                "kind": "chat",
                "hash": request_hash(req),
                "response": {
                    "text": resp.text,
                    "token_logprobs": resp.token_logprobs,
                    "usage": list(resp.usage),
                },
            }
        )
        return resp

    def embed(self, texts: Sequence[str], model: str) -> list[list[float]]:
        vectors = self.inner.embed(texts, model)
        self._append({"kind": "embed", "hash": embed_hash(model, texts), "vectors": vectors})
        return vectors


class OpenAIBackend:
    """OpenAI-compatible chat-completions and embeddings over HTTP."""

    deterministic = False

    def __init__(
        self,
        base_url: Optional[str] = None,
        api_key: Optional[str] = None,
        timeout: float = 120.0,
    ):
        import httpx

        self.base_url = (base_url or os.environ.get("QC_API_BASE", "")).rstrip("/")
        self.api_key = api_key or os.environ.get("QC_API_KEY", "")
        if not self.base_url:
            raise BackendError("no API base configured (QC_API_BASE)")
        self._client = httpx.Client(
            base_url=self.base_url,
            headers={"Authorization": f"Bearer {self.api_key}"},
            timeout=timeout,
        )

    def chat(self, req: ChatRequest) -> ChatResponse:
        payload: dict = {
            "model": req.model,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        }
        if req.response_shape == "json_object":
            payload["response_format"] = {"type": "json_object"}
        if req.want_logprobs:
            payload["logprobs"] = True
            payload["top_logprobs"] = 5
        start = time.monotonic()
        resp = self._client.post("/chat/completions", json=payload)
        latency = int((time.monotonic() - start) * 1000)
        if resp.status_code == 401:
            raise BackendError("auth failure")
        if resp.status_code in (429, 500, 502, 503):
            raise _Transient(f"HTTP {resp.status_code}")
        if resp.status_code == 400 and "context" in resp.text.lower():
            raise BackendError(f"context overflow: {resp.text[:300]}")
        if resp.status_code != 200:
            raise BackendError(f"HTTP {resp.status_code}: {resp.text[:300]}")
        data = resp.json()
        choice = data["choices"][0]
        token_logprobs = None
        lp = (choice.get("logprobs") or {}).get("content")
        if req.want_logprobs and lp:
            token_logprobs = [(t["token"], t["logprob"]) for t in lp]
        usage = data.get("usage", {})
        return ChatResponse(
            text=choice["message"]["content"],
            token_logprobs=token_logprobs,
            usage=(usage.get("prompt_tokens", 0), usage.get("completion_tokens", 0)),
            latency_ms=latency,
        )

    def embed(self, texts: Sequence[str], model: str) -> list[list[float]]:
        if not texts:
            raise BackendError("embed requires nonempty texts")
        resp = self._client.post("/embeddings", json={"model": model, "input": list(texts)})
        if resp.status_code in (429, 500, 502, 503):
            raise _Transient(f"HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise BackendError(f"HTTP {resp.status_code}: {resp.text[:300]}")
        data = resp.json()["data"]
        vecs = np.array([d["embedding"] for d in sorted(data, key=lambda d: d["index"])])
        return _normalize(vecs)


class _Transient(BackendError):
    pass


@dataclass
class Gateway:
    """Retry and concurrency wrapper around a backend."""

    backend: Backend
    max_retries: int = 3
    backoff_base: float = 0.5
    concurrency: int = 4
    embed_model: str = field(
        default_factory=lambda: os.environ.get("QC_EMBED_MODEL", "hash-64")
    )

    @property
    def deterministic(self) -> bool:
        return getattr(self.backend, "deterministic", False)

    def chat(self, req: ChatRequest) -> ChatResponse:
        attempt = 0
        while True:
            try:
                return self.backend.chat(req)
            except _Transient as exc:
                attempt += 1
                if attempt > self.max_retries:
                    raise BackendError(f"exhausted retries: {exc}") from exc
                time.sleep(self.backoff_base * (2 ** (attempt - 1)))

    def map_chat(self, requests: Sequence[ChatRequest]) -> list[ChatResponse]:
        """Dispatch concurrently up to the in-flight cap; results in order."""
        if not requests:
            return []
        with ThreadPoolExecutor(max_workers=self.concurrency) as pool:
            return list(pool.map(self.chat, requests))

    def embed(self, texts: Sequence[str], model: Optional[str] = None) -> list[list[float]]:
        if not texts:
            raise BackendError("embed requires nonempty texts")
        vecs = self.backend.embed(list(texts), model or self.embed_model)
        if len(vecs) != len(texts):
            raise BackendError("embedding count mismatch")
        return _normalize(np.array(vecs))


_FENCE_RE = re.compile(r"^\s*```(?:json)?\s*|\s*```\s*$", re.MULTILINE)


def strip_fences(raw: str) -> str:
    return _FENCE_RE.sub("", raw).strip()


def _loads_lenient(raw: str):
    text = strip_fences(raw)
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return None


def parse_scored_batch(raw: str, expected_keys: Sequence[int]) -> dict[int, tuple[str, int]]:
    """Parse a per-statement {REASONING, SCORE} JSON batch response.

    Falls back to per-key regex extraction when the payload is not valid
    JSON as a whole, then validates all expected keys and score ranges.
    """
    out: dict[int, tuple[str, int]] = {}
    data = _loads_lenient(raw)
    if isinstance(data, dict):
        for k, v in data.items():
            try:
                ki = int(k)
            except (TypeError, ValueError):
                continue
            if isinstance(v, dict) and "SCORE" in v:
                out[ki] = (str(v.get("REASONING", "")), v["SCORE"])
    if not out:
        pattern = re.compile(
            r'"(\d+)"\s*:\s*\{\s*"REASONING"\s*:\s*"((?:[^"\\]|\\.)*)"\s*,'
            r'\s*"SCORE"\s*:\s*(\d+)',
            re.DOTALL,
        )
        for m in pattern.finditer(raw):
            out[int(m.group(1))] = (m.group(2), int(m.group(3)))

    problems = []
    missing = [k for k in expected_keys if k not in out]
    if missing:
        problems.append(f"missing keys: {sorted(missing)}")
    for k in expected_keys:
        if k in out:
            score = out[k][1]
            if not isinstance(score, int) or not 1 <= score <= 10:
                problems.append(f"key {k}: score {score!r} outside [1, 10]")
    if problems:
        raise ParseError("; ".join(problems))
    return {k: out[k] for k in expected_keys}


def parse_binary_batch(raw: str, expected_keys: Sequence[int]) -> dict[int, bool]:
    """Parse a per-statement yes/no batch response into booleans."""
    data = _loads_lenient(raw)
    out: dict[int, bool] = {}
    if isinstance(data, dict):
        for k, v in data.items():
            try:
                ki = int(k)
            except (TypeError, ValueError):
                continue
            if isinstance(v, dict):
                v = v.get("ANSWER", v.get("answer"))
            if isinstance(v, bool):
                out[ki] = v
            elif isinstance(v, str) and v.strip().lower() in ("yes", "no"):
                out[ki] = v.strip().lower() == "yes"
    missing = [k for k in expected_keys if k not in out]
    if missing:
        raise ParseError(f"missing keys: {sorted(missing)}")
    return {k: out[k] for k in expected_keys}


def parse_assignment_batch(
    raw: str, expected_keys: Sequence[int], valid_letters: Sequence[str]
) -> tuple[dict[int, list[str]], list[str]]:
    """Parse a per-statement subtheme-letter assignment response.

    Returns (assignments, warnings); unknown letters are dropped with a
    warning rather than failing the batch.
    """
    data = _loads_lenient(raw)
    if not isinstance(data, dict):
        raise ParseError("malformed assignment payload")
    valid = set(valid_letters)
    out: dict[int, list[str]] = {}
    warnings: list[str] = []
    for k, v in data.items():
        try:
            ki = int(k)
        except (TypeError, ValueError):
            continue
        if not isinstance(v, list):
            warnings.append(f"key {k}: non-list value dropped")
            continue
        letters = []
        for letter in v:
            if letter in valid:
                letters.append(letter)
            else:
                warnings.append(f"key {k}: unknown subtheme {letter!r} dropped")
        out[ki] = letters
    missing = [k for k in expected_keys if k not in out]
    if missing:
        raise ParseError(f"missing keys: {sorted(missing)}")
    return {k: out[k] for k in expected_keys}, warnings


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0:
        return 0.0
    return float(np.dot(a, b) / denom)
