"""Sentence splitting, embeddings, and the batch-sampling strategies.

Two sampling strategies are provided: seeded uniform sampling, and
coverage-based sampling that picks the narratives least similar to what has
already been reviewed. Coverage works at the sentence level: a narrative's
coverage is the mean over its sentences of each sentence's maximum cosine
similarity to the sentences of the already-chosen set.

Embeddings come either from a remote encoder endpoint or from a
deterministic offline embedder (token-hash buckets) used in tests. All
vectors are L2-normalized client-side, so cosine similarity is a plain dot
product.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass
from typing import Iterable, Mapping, Protocol, Sequence

import httpx
import numpy as np

from . import API_KEY_ENV_VAR, CodebookForgeError
from .corpus import Corpus, DatasetSplit, concat_narrative


class EmbeddingError(CodebookForgeError):
    """Embedding transport failure or dimension mismatch."""


class SamplingError(CodebookForgeError):
    """The requested batch cannot be drawn from the remaining pool."""


# --- sentence splitting -----------------------------------------------------

# Split after ., !, ? followed by whitespace and an uppercase letter or digit.
_SPLIT_RE = re.compile(r"(?<=[.!?])\s+(?=[A-Z0-9])")

# Tokens that end with a terminator but never end a sentence.
_ABBREVIATIONS = frozenset(
    ["dr.", "mr.", "mrs.", "ms.", "st.", "vs.", "e.g.", "i.e.", "approx."]
)

_MIN_SENTENCE_CHARS = 2


def split_sentences(text: str) -> list[str]:
    """Split free text into sentences with a deterministic rule table."""
    if not text.strip():
        raise ValueError("cannot split whitespace-only text")
    pieces: list[str] = []
    start = 0
    for match in _SPLIT_RE.finditer(text):
        candidate = text[start : match.start()]
        last_token = candidate.rsplit(None, 1)[-1].lower() if candidate.split() else ""
        if last_token in _ABBREVIATIONS:
            continue
        pieces.append(candidate)
        start = match.end()
    pieces.append(text[start:])
    sentences = [p.strip() for p in pieces if p.strip()]

    # Fragments below the minimum length merge forward (trailing one merges back).
    merged: list[str] = []
    carry = ""
    for sentence in sentences:
        if carry:
            sentence = carry + " " + sentence
            carry = ""
        if len(sentence.replace(" ", "")) < _MIN_SENTENCE_CHARS:
            carry = sentence
        else:
            merged.append(sentence)
    if carry:
        if merged:
            merged[-1] = merged[-1] + " " + carry
        else:
            merged.append(carry)
    return merged


# --- embedders ---------------------------------------------------------------


@dataclass(frozen=True)
class EmbedderConfig:
    """How to reach (or fake) the sentence encoder."""

    endpoint_url: str = ""
    model_name: str = "all-MiniLM-L6-v2"
    dimension: int = 384
    batch_size: int = 32
    mode: str = "deterministic-test"  # "remote" | "deterministic-test"
    parallelism: int = 4
    max_retries: int = 3
    timeout: float = 30.0

    def __post_init__(self) -> None:
        if self.dimension <= 0:
            raise ValueError("dimension must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in ("remote", "deterministic-test"):
            raise ValueError(f"unknown embedder mode {self.mode!r}")


class Embedder(Protocol):
    dimension: int

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


def _normalize_rows(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise EmbeddingError("embedding endpoint returned a zero vector")
    return vectors / norms


_TOKEN_RE = re.compile(r"[a-z0-9']+")


class DeterministicEmbedder:
    """Offline test embedder: hash tokens into buckets, count, normalize.

    Identical strings embed identically and token overlap drives cosine
    similarity, which is all the sampling logic needs from an encoder.
    """

    def __init__(self, dimension: int = 64):
        self.dimension = dimension

    def _bucket(self, token: str) -> int:
        digest = hashlib.sha256(token.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "big") % self.dimension

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dimension), dtype=np.float64)
        for row, text in enumerate(texts):
            tokens = _TOKEN_RE.findall(text.lower()) or ["\x00empty"]
            for token in tokens:
                out[row, self._bucket(token)] += 1.0
        return _normalize_rows(out)


class EmbeddingCache:
    """JSONL-backed vector cache keyed by ``<model>:<sha256(text)>``.

    Safe for concurrent reads; inserts are serialized.
    """

    def __init__(self, path: str | None = None):
        self._path = path
        self._lock = threading.Lock()
        self._data: dict[str, list[float]] = {}
        if path and os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._data[rec["key"]] = rec["vector"]

    @staticmethod
    def key(model_name: str, text: str) -> str:
        digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
        return f"{model_name}:{digest}"

    def get(self, key: str) -> list[float] | None:
        return self._data.get(key)

    def put(self, key: str, vector: list[float]) -> None:
        with self._lock:
            if key in self._data:
                return
            self._data[key] = vector
            if self._path:
                with open(self._path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"key": key, "vector": vector}) + "\n")


class RemoteEmbedder:
    """Client for a `/v1/embeddings` endpoint, with retries and caching."""

    def __init__(
        self,
        cfg: EmbedderConfig,
        cache: EmbeddingCache | None = None,
        client: httpx.Client | None = None,
    ):
        self.cfg = cfg
        self.dimension = cfg.dimension
        self._cache = cache if cache is not None else EmbeddingCache()
        self._client = client or httpx.Client(timeout=cfg.timeout)

    def _post(self, texts: Sequence[str]) -> list[list[float]]:
        url = self.cfg.endpoint_url.rstrip("/") + "/v1/embeddings"
        headers = {}
        api_key = os.environ.get(API_KEY_ENV_VAR)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        body = {"model": self.cfg.model_name, "input": list(texts)}
        delay = 1.0
        last_error: Exception | None = None
        for attempt in range(self.cfg.max_retries + 1):
            try:
                response = self._client.post(url, json=body, headers=headers)
            except httpx.HTTPError as exc:
                last_error = exc
            else:
                if response.status_code == 429:
                    last_error = EmbeddingError("embedding endpoint rate-limited (429)")
                elif response.status_code >= 300:
                    raise EmbeddingError(
                        f"embedding endpoint returned status {response.status_code}"
                    )
                else:
                    data = response.json()["data"]
                    return [item["embedding"] for item in data]
            if attempt < self.cfg.max_retries:
                time.sleep(delay)
                delay *= 2
        raise EmbeddingError(f"embedding request failed after retries: {last_error}")

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        keys = [EmbeddingCache.key(self.cfg.model_name, t) for t in texts]
        vectors: list[list[float] | None] = [self._cache.get(k) for k in keys]
        missing = [i for i, v in enumerate(vectors) if v is None]
        for chunk_start in range(0, len(missing), self.cfg.batch_size):
            chunk = missing[chunk_start : chunk_start + self.cfg.batch_size]
            fetched = self._post([texts[i] for i in chunk])
            if len(fetched) != len(chunk):
                raise EmbeddingError(
                    f"endpoint returned {len(fetched)} vectors for {len(chunk)} inputs"
                )
            for i, vec in zip(chunk, fetched):
                if len(vec) != self.cfg.dimension:
                    raise EmbeddingError(
                        f"expected dimension {self.cfg.dimension}, got {len(vec)}"
                    )
                vectors[i] = vec
                self._cache.put(keys[i], vec)
        matrix = np.asarray(vectors, dtype=np.float64)
        return _normalize_rows(matrix)


def build_embedder(cfg: EmbedderConfig, cache_path: str | None = None) -> Embedder:
    if cfg.mode == "deterministic-test":
        return DeterministicEmbedder(dimension=cfg.dimension)
    return RemoteEmbedder(cfg, cache=EmbeddingCache(cache_path))


# --- similarity and coverage --------------------------------------------------


def cosine(u: Sequence[float], v: Sequence[float]) -> float:
    """Cosine similarity, clamped into [-1, 1] against float drift."""
    a = np.asarray(u, dtype=np.float64)
    b = np.asarray(v, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class CoverageScore:
    narrative_id: str
    score: float


@dataclass(frozen=True)
class SentenceVector:
    """One sentence's unit embedding, addressed by narrative and position."""

    narrative_id: str
    sentence_index: int
    vector: tuple[float, ...]

    def __post_init__(self) -> None:
        norm = float(np.linalg.norm(self.vector))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"sentence vector norm {norm} is not 1 ± 1e-6")


def sentence_vectors(
    narrative_id: str, text: str, embedder: Embedder
) -> list[SentenceVector]:
    matrix = sentence_matrix(text, embedder)
    return [
        SentenceVector(narrative_id=narrative_id, sentence_index=i, vector=tuple(row))
        for i, row in enumerate(matrix)
    ]


def sentence_matrix(text: str, embedder: Embedder) -> np.ndarray:
    return embedder.embed(split_sentences(text))


def coverage_scores(
    candidates: Mapping[str, str],
    chosen_texts: Iterable[str],
    embedder: Embedder,
) -> list[CoverageScore]:
    """Score each candidate narrative against the already-chosen set.

    Per candidate: mean over its sentences of the max cosine similarity to
    all sentences of all chosen narratives. An empty chosen set scores every
    candidate 0, which makes the first coverage batch degenerate to random.
    """
    if not candidates:
        raise ValueError("no candidate narratives to score")
    chosen_sentences = [s for text in chosen_texts for s in split_sentences(text)]
    if not chosen_sentences:
        return [CoverageScore(nid, 0.0) for nid in candidates]
    chosen_matrix = embedder.embed(chosen_sentences)
    scores = []
    for narrative_id, text in candidates.items():
        cand_matrix = sentence_matrix(text, embedder)
        sims = cand_matrix @ chosen_matrix.T
        score = float(np.clip(sims.max(axis=1), -1.0, 1.0).mean())
        scores.append(CoverageScore(narrative_id, score))
    return scores


def keyword_upsample(
    corpus: Corpus, keywords: Sequence[str], k: int, embedder: Embedder
) -> DatasetSplit:
    """Select the k narratives nearest the joined keyword phrase.

    The keywords embed as one comma-joined string; narratives embed as their
    concatenated report text. Ties break by ascending id.
    """
    if not keywords:
        raise ValueError("keyword list is empty")
    if k > len(corpus):
        raise SamplingError(f"k={k} exceeds corpus size {len(corpus)}")
    query = embedder.embed([", ".join(keywords)])[0]
    ids = sorted(corpus.ids())
    texts = [concat_narrative(corpus.get(i)) for i in ids]
    sims = embedder.embed(texts) @ query
    order = sorted(range(len(ids)), key=lambda i: (-sims[i], ids[i]))
    return DatasetSplit(role="full", ids=tuple(ids[i] for i in order[:k]), seed=0)


def select_batch(
    strategy: str,
    pool: Sequence[str],
    chosen_history: Sequence[str],
    n: int,
    seed,
    *,
    texts: Mapping[str, str] | None = None,
    embedder: Embedder | None = None,
) -> list[str]:
    """Draw the next batch of n ids from the pool, excluding history.

    ``random`` is a seeded uniform draw without replacement; ``coverage``
    takes the n candidates with the lowest coverage against the history,
    ties broken by ascending id. ``seed`` accepts anything
    ``numpy.random.default_rng`` does (int or SeedSequence).
    """
    history = set(chosen_history)
    eligible = sorted(i for i in pool if i not in history)
    if n > len(eligible):
        raise SamplingError(
            f"batch size {n} exceeds remaining pool of {len(eligible)} "
            f"(pool {len(pool)}, already chosen {len(history)})"
        )
    if strategy == "random" or not history:
        rng = np.random.default_rng(seed)
        picked = rng.permutation(len(eligible))[:n]
        return [eligible[i] for i in picked]
    if strategy != "coverage":
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    if texts is None or embedder is None:
        raise ValueError("coverage sampling needs narrative texts and an embedder")
    scores = coverage_scores(
        {i: texts[i] for i in eligible},
        [texts[i] for i in sorted(history) if i in texts],
        embedder,
    )
    ranked = sorted(scores, key=lambda s: (s.score, s.narrative_id))
    return [s.narrative_id for s in ranked[:n]]
