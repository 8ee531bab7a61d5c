"""Text embeddings and the cosine kernel behind semantic deduplication.

Vectors are unit-normalized on ingest, so similarity is a plain dot product
and invariant to any positive scaling of raw provider output. The mock
embedder is a deterministic hashed bag-of-words, good enough to exercise
dedup logic without a hosted model.
"""

from __future__ import annotations

import hashlib
import os
import re
import threading
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import requests

from .backend import ProtocolError, TransportError

ENV_EMBED_URL = "BRANCHPOOL_EMBED_URL"
ENV_EMBED_KEY = "BRANCHPOOL_EMBED_KEY"
ENV_EMBED_MODEL = "BRANCHPOOL_EMBED_MODEL"

_NORM_TOLERANCE = 1e-6


@dataclass(frozen=True)
class EmbeddingVector:
    """A unit-normalized embedding."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.ndim != 1 or values.size == 0:
            raise ValueError("embedding must be a nonempty 1-d vector")
        norm = float(np.linalg.norm(values))
        if abs(norm - 1.0) > _NORM_TOLERANCE:
            raise ValueError(f"embedding is not unit-normalized (norm={norm})")

    @property
    def dimension(self) -> int:
        return int(self.values.shape[0])

    @classmethod
    def from_raw(cls, raw: Sequence[float]) -> "EmbeddingVector":
        """Normalize a raw provider vector onto the unit sphere."""
        values = np.asarray(raw, dtype=np.float64)
        norm = float(np.linalg.norm(values))
        if norm == 0.0:
            raise ValueError("cannot normalize an all-zero embedding")
        return cls(values / norm)


def cosine_similarity(u: EmbeddingVector, v: EmbeddingVector) -> float:
    """Dot product of two unit vectors; symmetric by construction."""
    if u.dimension != v.dimension:
        raise ValueError(f"dimension mismatch: {u.dimension} vs {v.dimension}")
    return float(np.dot(u.values, v.values))


def max_similarity(candidate: EmbeddingVector, pool: Sequence[EmbeddingVector]) -> float:
    """Max cosine between *candidate* and any pool vector (linear scan)."""
    if not pool:
        raise ValueError("max_similarity requires a nonempty pool")
    return max(cosine_similarity(candidate, vector) for vector in pool)


_TOKEN_RE = re.compile(r"[a-z0-9]+")


class MockEmbedder:
    """Hashed bag-of-words embedder: deterministic, offline, word-order blind.

    Each lowercased alphanumeric token adds one count to a sha256-chosen
    bucket; the count vector is then L2-normalized. Distinct words may
    collide into one bucket, which only ever raises similarity; fixtures
    that rely on exact cosine values must be checked against this scheme.
    Text with no alphanumeric tokens hashes as one opaque token rather than
    failing, so a single unusual note cannot abort a run.
    """

    def __init__(self, dimension: int = 256):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = dimension

    def _bucket(self, token: str) -> int:
        digest = hashlib.sha256(token.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little") % self.dimension

    def embed(self, text: str) -> EmbeddingVector:
        if not text or not text.strip():
            raise ValueError("cannot embed empty text")
        counts = np.zeros(self.dimension, dtype=np.float64)
        tokens = _TOKEN_RE.findall(text.lower())
        if not tokens:
            tokens = [text.strip().lower()]
        for token in tokens:
            counts[self._bucket(token)] += 1.0
        return EmbeddingVector.from_raw(counts)


class RemoteEmbedder:
    """Client for an HTTP+JSON embeddings endpoint.

    The vector dimension is discovered from the first response and pinned;
    a later response with a different dimension is a protocol error.
    """

    def __init__(
        self,
        endpoint_url: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 60.0,
        max_attempts: int = 3,
    ):
        self.endpoint_url = endpoint_url
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.max_attempts = max_attempts
        self._dimension: int | None = None
        self._local = threading.local()
        self._pin_lock = threading.Lock()

    @classmethod
    def from_env(cls, **kwargs) -> "RemoteEmbedder":
        url = os.environ.get(ENV_EMBED_URL, "")
        if not url:
            raise TransportError(f"no embedding endpoint configured; set {ENV_EMBED_URL}")
        model = os.environ.get(ENV_EMBED_MODEL, "default")
        return cls(url, model, api_key=os.environ.get(ENV_EMBED_KEY), **kwargs)

    def _session(self) -> requests.Session:
        if not hasattr(self._local, "session"):
            self._local.session = requests.Session()
        return self._local.session

    def embed(self, text: str) -> EmbeddingVector:
        if not text or not text.strip():
            raise ValueError("cannot embed empty text")
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {"model": self.model, "input": [text]}
        last_error: Exception | None = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                response = self._session().post(
                    self.endpoint_url, json=payload, headers=headers, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_error = exc
            else:
                if response.status_code in (429,) or response.status_code >= 500:
                    last_error = TransportError(f"server returned {response.status_code}")
                elif response.status_code != 200:
                    raise ProtocolError(
                        f"embed endpoint returned {response.status_code}: {response.text[:500]}"
                    )
                else:
                    return self._parse_response(response)
            if attempt < self.max_attempts:
                time.sleep(0.5 * 2 ** (attempt - 1))
        raise TransportError(
            f"embed request failed after {self.max_attempts} attempts: {last_error}",
            attempts=self.max_attempts,
        )

    def _parse_response(self, response: requests.Response) -> EmbeddingVector:
        try:
            raw = response.json()["data"][0]["embedding"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed embedding response: {exc}") from None
        vector = EmbeddingVector.from_raw(raw)
        with self._pin_lock:
            if self._dimension is None:
                self._dimension = vector.dimension
            elif vector.dimension != self._dimension:
                raise ProtocolError(
                    f"embedding dimension changed: {vector.dimension} != pinned {self._dimension}"
                )
        return vector
