"""LLM backends: a deterministic mock and an OpenAI-compatible HTTP client.

Both implement the LLMBackend protocol: ``complete`` for text generation
(optionally constrained to a label set) and ``embed`` for unit-norm sentence
embeddings. Backends are shared across worker threads.
"""

import hashlib
import json
import logging
import os
import random
import threading
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from typing import Any, Protocol

import httpx
import Levenshtein
import numpy as np
from numpy.typing import ArrayLike

from src.privicl.core.text import word_tokens
from src.privicl.utils.config import BackendKind, BackendProfile
from src.privicl.utils.errors import BackendError

logger = logging.getLogger(__name__)

LOGIT_BIAS = 100
BACKOFF_BASE_SECONDS = 1.0
MOCK_RESPONSE_WORDS = 8


@dataclass(frozen=True)
class CompletionRequest:
    """One completion call.

    Attributes:
        prompt: Prompt text.
        max_tokens: Completion length cap.
        temperature: Sampling temperature.
        constrained_labels: When set, the answer must be exactly one of these.
        stop_sequences: Sequences that end generation.
        sample_index: Distinguishes repeated draws of the same prompt.
    """

    prompt: str
    max_tokens: int = 64
    temperature: float = 0.0
    constrained_labels: tuple[str, ...] | None = None
    stop_sequences: tuple[str, ...] | None = None
    sample_index: int = 0

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if not self.temperature >= 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.constrained_labels is not None:
            labels = self.constrained_labels
            if not labels or len(set(labels)) != len(labels) or not all(labels):
                raise ValueError("constrained_labels must be distinct non-empty strings")


@dataclass(frozen=True)
class Embedding:
    """Unit-norm sentence embedding.

    Attributes:
        values: The vector, L2 norm 1.
    """

    values: np.ndarray

    @classmethod
    def from_vector(cls, vector: ArrayLike) -> "Embedding":
        """Normalize ``vector`` to unit length."""
        values = np.asarray(vector, dtype=float)
        if values.ndim != 1 or values.size == 0:
            raise ValueError("embedding must be a non-empty 1-D vector")
        norm = float(np.linalg.norm(values))
        if not np.isfinite(norm) or norm == 0:
            raise ValueError("embedding must be finite and non-zero")
        return cls(values / norm)

    @property
    def dimension(self) -> int:
        return self.values.size


class LLMBackend(Protocol):
    """What the aggregation pipelines need from a language model."""

    profile: BackendProfile
    request_count: int

    def complete(self, request: CompletionRequest) -> str: ...

    def embed(self, text: str) -> Embedding: ...

    def close(self) -> None: ...


def nearest_label(text: str, labels: Sequence[str]) -> str:
    """Map free text onto a label.

    An exact (case-insensitive) match wins, then the first label sharing a
    prefix with the text, then the smallest edit distance.

    Raises:
        BackendError: If the text is empty.
    """
    answer = text.strip()
    if not answer:
        raise BackendError("empty completion cannot be mapped to a label")
    lowered = answer.lower()
    for label in labels:
        if label.lower() == lowered:
            return label
    for label in labels:
        if label.lower().startswith(lowered) or lowered.startswith(label.lower()):
            return label
    return min(labels, key=lambda label: Levenshtein.distance(label.lower(), lowered))


def stable_hash(*parts: object) -> int:
    """64-bit hash of the parts, stable across processes and platforms."""
    digest = hashlib.blake2b("\x1f".join(map(str, parts)).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big")


class MockBackend:
    """Deterministic backend for tests and dry runs.

    Completions are looked up in this order: exact prompt match in ``table``,
    the longest ``table`` key the prompt ends with, then ``responder``. When
    none applies, constrained requests get a label chosen by hashing the
    prompt, and free requests get words drawn from the prompt itself. Every
    output is a pure function of the request and the seed.
    """

    def __init__(
        self,
        seed: int = 0,
        table: Mapping[str, str] | None = None,
        responder: Callable[[CompletionRequest], str | None] | None = None,
        embedding_table: Mapping[str, ArrayLike] | None = None,
        dimension: int = 1536,
        profile: BackendProfile | None = None,
    ) -> None:
        if dimension < 1:
            raise ValueError(f"dimension must be >= 1, got {dimension}")
        self.seed = seed
        self.table = dict(table or {})
        self.responder = responder
        self.embedding_table = dict(embedding_table or {})
        self.dimension = dimension
        self.profile = profile or BackendProfile(
            kind=BackendKind.MOCK, embedding_dimension=dimension
        )
        self.request_count = 0
        self._lock = threading.Lock()

    def _count(self) -> None:
        with self._lock:
            self.request_count += 1

    def _lookup(self, request: CompletionRequest) -> str | None:
        if request.prompt in self.table:
            return self.table[request.prompt]
        prompt = request.prompt.rstrip()
        matches = [key for key in self.table if key and prompt.endswith(key.rstrip())]
        if matches:
            return self.table[max(matches, key=len)]
        if self.responder is not None:
            return self.responder(request)
        return None

    def complete(self, request: CompletionRequest) -> str:
        self._count()
        text = self._lookup(request)
        labels = request.constrained_labels
        if labels:
            if text is not None:
                return nearest_label(text, labels)
            index = stable_hash(self.seed, request.prompt, request.sample_index)
            return labels[index % len(labels)]
        if text is not None:
            return text

        words = word_tokens(request.prompt)
        if not words:
            return ""
        rng = np.random.default_rng(stable_hash(self.seed, request.prompt, request.sample_index))
        n_words = min(MOCK_RESPONSE_WORDS, request.max_tokens, len(words))
        return " ".join(words[i] for i in rng.choice(len(words), size=n_words, replace=False))

    def embed(self, text: str) -> Embedding:
        if not text:
            raise ValueError("cannot embed empty text")
        self._count()
        if text in self.embedding_table:
            return Embedding.from_vector(self.embedding_table[text])
        rng = np.random.default_rng(stable_hash(self.seed, "embed", text))
        return Embedding.from_vector(rng.standard_normal(self.dimension))

    def close(self) -> None:
        pass


class HttpBackend:
    """Client for OpenAI-compatible ``/completions`` and ``/embeddings`` endpoints.

    Transport errors, HTTP 429 and 5xx responses are retried with exponential
    backoff and jitter. Other HTTP errors fail at once, and a well-formed
    response is never re-requested. At most ``profile.parallelism_cap``
    requests are in flight.
    """

    def __init__(
        self,
        profile: BackendProfile,
        api_key: str | None = None,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.profile = profile
        key = api_key if api_key is not None else os.environ.get(profile.api_key_env, "")
        if not key and client is None:
            logger.warning("No API key found in $%s", profile.api_key_env)
        self._client = client or httpx.Client(
            base_url=profile.endpoint_url.rstrip("/"),
            timeout=profile.request_timeout,
            headers={"Authorization": f"Bearer {key}"},
        )
        self._slots = threading.BoundedSemaphore(profile.parallelism_cap)
        self._lock = threading.Lock()
        self._sleep = sleep
        self.request_count = 0

    def _post(self, path: str, payload: dict[str, Any]) -> dict[str, Any]:
        retries = self.profile.max_retries
        reason = "no attempt made"
        for attempt in range(retries + 1):
            with self._slots:
                with self._lock:
                    self.request_count += 1
                try:
                    response = self._client.post(path, json=payload)
                except httpx.TransportError as e:
                    response = None
                    reason = f"{type(e).__name__}: {e}"

            if response is not None:
                status = response.status_code
                if status == 429 or status >= 500:
                    reason = f"HTTP {status}"
                elif response.is_error:
                    raise BackendError(f"HTTP {status} from {path}: {response.text[:200]}", attempt + 1)
                else:
                    try:
                        return response.json()
                    except json.JSONDecodeError as e:
                        raise BackendError(f"Malformed JSON from {path}", attempt + 1) from e

            if attempt < retries:
                wait = BACKOFF_BASE_SECONDS * 2**attempt + random.uniform(0, BACKOFF_BASE_SECONDS)
                logger.warning("%s failed (%s), retrying in %.1fs", path, reason, wait)
                self._sleep(wait)

        raise BackendError(f"{path} failed: {reason}", retries + 1)

    def complete(self, request: CompletionRequest) -> str:
        payload: dict[str, Any] = {
            "model": self.profile.model_name,
            "prompt": request.prompt,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        }
        if request.stop_sequences:
            payload["stop"] = list(request.stop_sequences)

        labels = request.constrained_labels
        token_ids = self.profile.label_token_ids
        if labels and token_ids:
            missing = [label for label in labels if label not in token_ids]
            if missing:
                raise BackendError(f"No token id configured for labels {missing}")
            payload["logit_bias"] = {str(token_ids[label]): LOGIT_BIAS for label in labels}
            payload["max_tokens"] = 1

        data = self._post("/completions", payload)
        try:
            text = data["choices"][0]["text"]
        except (KeyError, IndexError, TypeError) as e:
            raise BackendError("Completion response has no choices[0].text") from e
        return nearest_label(text, labels) if labels else text

    def embed(self, text: str) -> Embedding:
        if not text:
            raise ValueError("cannot embed empty text")
        data = self._post(
            "/embeddings", {"model": self.profile.embedding_model_name, "input": text}
        )
        try:
            vector = data["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError) as e:
            raise BackendError("Embedding response has no data[0].embedding") from e
        if len(vector) != self.profile.embedding_dimension:
            raise BackendError(
                f"Embedding dimension {len(vector)} != configured "
                f"{self.profile.embedding_dimension}"
            )
        return Embedding.from_vector(vector)

    def close(self) -> None:
        self._client.close()


def make_backend(profile: BackendProfile, seed: int = 0) -> LLMBackend:
    """Build the backend a profile describes.

    Args:
        profile: Backend profile. A mock profile may name a JSON table file of
            prompt suffix -> response.
        seed: Seed of the mock backend.
    """
    if profile.kind is BackendKind.HTTP:
        return HttpBackend(profile)
    table: dict[str, str] = {}
    if profile.mock_table:
        with open(profile.mock_table, encoding="utf-8") as f:
            table = json.load(f)
    return MockBackend(seed, table, dimension=profile.embedding_dimension, profile=profile)
