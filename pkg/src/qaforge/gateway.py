"""Uniform access to every model role over an OpenAI-compatible wire contract.

All model traffic in the pipeline goes through a :class:`Gateway`; nothing
else opens a network connection. The gateway maps roles to endpoints, applies
per-role default temperatures, retries transient failures with exponential
backoff, L2-normalizes embeddings, and logs role/attempt/latency for every
call. Secrets come from environment variables named in config and are never
logged.

A fully deterministic :class:`MockBackend` serves offline tests and demo
runs: scripted matchers return canned responses, and unmatched prompts fall
back to seeded pseudo-random (but reproducible) text or hash-projected unit
embeddings.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)


class ModelRole(str, Enum):
    EXTRACTOR = "extractor"
    BASE_GENERATOR = "base_generator"
    REFINER = "refiner"
    JUDGE = "judge"
    EMBEDDER = "embedder"
    DISCRIMINATOR = "discriminator"


# judges/extractor pinned near-deterministic; the base generator is the one
# role whose job is diversity
DEFAULT_TEMPERATURES = {
    ModelRole.EXTRACTOR: 0.0,
    ModelRole.BASE_GENERATOR: 1.0,
    ModelRole.REFINER: 0.3,
    ModelRole.JUDGE: 0.0,
    ModelRole.DISCRIMINATOR: 0.0,
}


class GatewayError(Exception):
    """Base for all gateway failures."""


class EndpointUnreachableError(GatewayError):
    pass


class GatewayTimeoutError(GatewayError):
    pass


class MalformedResponseError(GatewayError):
    pass


class TransientBackendError(GatewayError):
    """Retryable failure (5xx / 429 / connection reset)."""

    def __init__(self, message: str, status: Optional[int] = None):
        super().__init__(message)
        self.status = status


class RetriesExhaustedError(GatewayError):
    def __init__(self, attempts: int, last: Exception):
        super().__init__(f"gave up after {attempts} attempts: {last}")
        self.attempts = attempts
        self.last = last


@dataclass
class RetryPolicy:
    max_attempts: int = 3
    initial_delay: float = 0.5
    multiplier: float = 2.0
    retryable_statuses: frozenset = frozenset({408, 429, 500, 502, 503, 504})

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


@dataclass
class RoleConfig:
    endpoint_url: str = ""
    model_name: str = "mock"
    api_key_env: str = ""
    temperature: Optional[float] = None
    max_tokens: int = 2048


@dataclass
class ChatRequest:
    role: ModelRole
    messages: List[Dict[str, str]]
    temperature: Optional[float] = None
    max_tokens: Optional[int] = None
    stop: Optional[List[str]] = None
    thinking_mode: Optional[bool] = None


@dataclass
class ChatResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int
    latency_s: float
    attempts: int


@dataclass
class EmbeddingRequest:
    role: ModelRole
    texts: List[str]


@dataclass
class EmbeddingResponse:
    vectors: np.ndarray  # shape (len(texts), dim); rows unit-norm
    latency_s: float
    attempts: int


class Gateway:
    """Role-routed chat/embedding client with retry and in-flight capping."""

    def __init__(
        self,
        backend,
        roles: Optional[Dict[ModelRole, RoleConfig]] = None,
        retry: Optional[RetryPolicy] = None,
        max_inflight: int = 8,
        max_input_chars: int = 200_000,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.backend = backend
        self.roles = roles or {r: RoleConfig() for r in ModelRole}
        self.retry = retry or RetryPolicy()
        self.max_input_chars = max_input_chars
        self._sleep = sleep
        self._sem = threading.Semaphore(max_inflight)

    def _role_config(self, role: ModelRole) -> RoleConfig:
        try:
            return self.roles[role]
        except KeyError:
            raise GatewayError(f"role not configured: {role.value}")

    def chat(self, req: ChatRequest) -> ChatResponse:
        cfg = self._role_config(req.role)
        temperature = req.temperature
        if temperature is None:
            temperature = cfg.temperature
        if temperature is None:
            temperature = DEFAULT_TEMPERATURES.get(req.role, 0.0)
        thinking = req.thinking_mode
        if thinking is None and req.role is ModelRole.REFINER:
            thinking = False  # refiner runs without deliberation traces
        messages = self._truncate(req.messages)
        start = time.monotonic()
        text, attempts = self._with_retries(
            req.role,
            lambda: self.backend.chat(
                cfg,
                messages,
                temperature=temperature,
                max_tokens=req.max_tokens or cfg.max_tokens,
                stop=req.stop,
                thinking=thinking,
            ),
        )
        latency = time.monotonic() - start
        prompt_tokens = sum(len(m["content"].split()) for m in messages)
        logger.info(
            "chat role=%s attempts=%d latency=%.3fs", req.role.value, attempts, latency
        )
        return ChatResponse(
            text=text,
            prompt_tokens=prompt_tokens,
            completion_tokens=len(text.split()),
            latency_s=latency,
            attempts=attempts,
        )

    def embed(self, req: EmbeddingRequest) -> EmbeddingResponse:
        if req.role is not ModelRole.EMBEDDER:
            raise GatewayError("embed requires the embedder role")
        cfg = self._role_config(req.role)
        if not req.texts:
            return EmbeddingResponse(
                vectors=np.zeros((0, 0)), latency_s=0.0, attempts=0
            )
        start = time.monotonic()
        raw, attempts = self._with_retries(
            req.role, lambda: self.backend.embed(cfg, list(req.texts))
        )
        latency = time.monotonic() - start
        vectors = np.asarray(raw, dtype=float)
        if vectors.ndim != 2 or vectors.shape[0] != len(req.texts):
            raise MalformedResponseError(
                f"expected {len(req.texts)} vectors, got shape {vectors.shape}"
            )
        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise MalformedResponseError("embedding backend returned a zero vector")
        vectors = vectors / norms
        logger.info(
            "embed role=%s n=%d attempts=%d latency=%.3fs",
            req.role.value,
            len(req.texts),
            attempts,
            latency,
        )
        return EmbeddingResponse(vectors=vectors, latency_s=latency, attempts=attempts)

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        """Convenience wrapper matching the corpus/graph embedder signature."""
        return self.embed(
            EmbeddingRequest(role=ModelRole.EMBEDDER, texts=list(texts))
        ).vectors

    def chat_text(self, role: ModelRole, prompt: str, **kwargs) -> str:
        """Single-user-message chat returning the reply text."""
        req = ChatRequest(
            role=role, messages=[{"role": "user", "content": prompt}], **kwargs
        )
        return self.chat(req).text

    def _truncate(self, messages: List[Dict[str, str]]) -> List[Dict[str, str]]:
        total = sum(len(m["content"]) for m in messages)
        if total <= self.max_input_chars:
            return messages
        # drop characters tail-first until under the cap
        logger.warning(
            "input length %d exceeds cap %d; truncating tail-first",
            total,
            self.max_input_chars,
        )
        out = [dict(m) for m in messages]
        excess = total - self.max_input_chars
        for m in reversed(out):
            if excess <= 0:
                break
            cut = min(excess, len(m["content"]))
            m["content"] = m["content"][: len(m["content"]) - cut]
            excess -= cut
        return [m for m in out if m["content"]]

    def _with_retries(self, role: ModelRole, call):
        delay = self.retry.initial_delay
        last: Optional[Exception] = None
        with self._sem:
            for attempt in range(1, self.retry.max_attempts + 1):
                try:
                    return call(), attempt
                except (TransientBackendError, GatewayTimeoutError, EndpointUnreachableError) as exc:
                    last = exc
                    logger.warning(
                        "role=%s attempt=%d failed: %s", role.value, attempt, exc
                    )
                    if attempt < self.retry.max_attempts:
                        self._sleep(delay)
                        delay *= self.retry.multiplier
        raise RetriesExhaustedError(self.retry.max_attempts, last)


class HttpBackend:
    """OpenAI-compatible HTTP backend (chat completions + embeddings)."""

    def __init__(self, timeout: float = 120.0):
        import httpx

        self._client = httpx.Client(timeout=timeout)
        self._httpx = httpx

    def _headers(self, cfg: RoleConfig) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if cfg.api_key_env:
            key = os.environ.get(cfg.api_key_env, "")
            if key:
                headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, cfg: RoleConfig, path: str, body: dict) -> dict:
        url = cfg.endpoint_url.rstrip("/") + path
        try:
            resp = self._client.post(url, json=body, headers=self._headers(cfg))
        except self._httpx.TimeoutException as exc:
            raise GatewayTimeoutError(str(exc))
        except self._httpx.TransportError as exc:
            raise EndpointUnreachableError(str(exc))
        if resp.status_code in RetryPolicy().retryable_statuses:
            raise TransientBackendError(
                f"status {resp.status_code}", status=resp.status_code
            )
        if resp.status_code != 200:
            raise GatewayError(f"status {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()
        except ValueError as exc:
            raise MalformedResponseError(f"invalid JSON body: {exc}")

    def chat(self, cfg, messages, temperature, max_tokens, stop, thinking) -> str:
        body = {
            "model": cfg.model_name,
            "messages": messages,
            "temperature": temperature,
            "max_tokens": max_tokens,
        }
        if stop:
            body["stop"] = stop
        if thinking is not None:
            body["chat_template_kwargs"] = {"enable_thinking": thinking}
        data = self._post(cfg, "/chat/completions", body)
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError(f"unexpected chat payload: {exc}")

    def embed(self, cfg, texts) -> List[List[float]]:
        data = self._post(
            cfg, "/embeddings", {"model": cfg.model_name, "input": texts}
        )
        try:
            items = sorted(data["data"], key=lambda d: d["index"])
            return [item["embedding"] for item in items]
        except (KeyError, TypeError) as exc:
            raise MalformedResponseError(f"unexpected embedding payload: {exc}")


Matcher = Union[str, re.Pattern, Callable[[str], bool]]
ChatScriptValue = Union[str, Callable[[str], str]]
EmbedScriptValue = Union[Sequence[float], Callable[[str], Sequence[float]]]


def _matches(matcher: Matcher, text: str) -> bool:
    if isinstance(matcher, str):
        return matcher in text
    if isinstance(matcher, re.Pattern):
        return bool(matcher.search(text))
    return bool(matcher(text))


class MockBackend:
    """Deterministic scripted backend for offline runs and tests.

    ``chat_script`` / ``embed_script`` are ordered (matcher, response) pairs;
    the first matching entry wins. A response callable may raise to simulate
    backend failures. Unmatched chats get seeded pseudo-random text; unmatched
    embeddings get a hash projection onto the unit sphere. Everything is a
    pure function of (script, seed, input), so transcripts are reproducible.
    """

    def __init__(
        self,
        chat_script: Optional[Sequence[Tuple[Matcher, ChatScriptValue]]] = None,
        embed_script: Optional[Sequence[Tuple[Matcher, EmbedScriptValue]]] = None,
        seed: int = 0,
        embed_dim: int = 64,
    ):
        self.chat_script = list(chat_script or [])
        self.embed_script = list(embed_script or [])
        self.seed = seed
        self.embed_dim = embed_dim
        self.transcript: List[Tuple[str, str, str]] = []  # (kind, input, output)

    def chat(self, cfg, messages, temperature, max_tokens, stop, thinking) -> str:
        prompt = "\n".join(m["content"] for m in messages)
        for matcher, value in self.chat_script:
            if _matches(matcher, prompt):
                text = value(prompt) if callable(value) else value
                break
        else:
            text = self._fallback_text(prompt)
        self.transcript.append(("chat", prompt, text))
        return text

    def embed(self, cfg, texts) -> List[List[float]]:
        out = []
        for text in texts:
            vec = None
            for matcher, value in self.embed_script:
                if _matches(matcher, text):
                    vec = value(text) if callable(value) else value
                    break
            if vec is None:
                vec = self.hash_embedding(text)
            out.append(list(np.asarray(vec, dtype=float)))
            self.transcript.append(("embed", text, repr(out[-1][:4])))
        return out

    def _rng(self, *parts: str) -> np.random.RandomState:
        digest = hashlib.sha256(
            ("\x1f".join(parts) + f"\x1f{self.seed}").encode("utf-8")
        ).digest()
        return np.random.RandomState(int.from_bytes(digest[:4], "big"))

    def _fallback_text(self, prompt: str) -> str:
        rng = self._rng("chat", prompt)
        words = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta"]
        n = 6 + int(rng.randint(0, 6))
        return " ".join(words[int(i)] for i in rng.randint(0, len(words), size=n))

    def hash_embedding(self, text: str) -> np.ndarray:
        """Seeded hash projection onto the unit sphere.

        Each lowercase token hashes to a fixed random direction; the text
        embeds as the normalized token sum, so overlapping texts correlate.
        Tokenless text falls back to hashing the raw string.
        """
        tokens = re.findall(r"\w+", text.lower()) or [text]
        vec = np.zeros(self.embed_dim)
        for tok in tokens:
            tv = self._rng("embed-token", tok).standard_normal(self.embed_dim)
            vec += tv / np.linalg.norm(tv)
        norm = np.linalg.norm(vec)
        if norm == 0:
            vec = self._rng("embed", text).standard_normal(self.embed_dim)
            norm = np.linalg.norm(vec)
        return vec / norm


def fail_n_times(n: int, then: ChatScriptValue = "OK") -> Callable[[str], str]:
    """Script helper: raise a transient error on the first n calls."""
    state = {"calls": 0}

    def _respond(prompt: str) -> str:
        state["calls"] += 1
        if state["calls"] <= n:
            raise TransientBackendError(f"scripted failure {state['calls']}")
        return then(prompt) if callable(then) else then

    return _respond


def mock_gateway(
    chat_script=None,
    embed_script=None,
    seed: int = 0,
    retry: Optional[RetryPolicy] = None,
    embed_dim: int = 64,
) -> Gateway:
    """A gateway wired to a deterministic mock backend (no sleeping between retries)."""
    backend = MockBackend(
        chat_script=chat_script, embed_script=embed_script, seed=seed, embed_dim=embed_dim
    )
    return Gateway(backend=backend, retry=retry, sleep=lambda _t: None)
