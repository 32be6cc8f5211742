"""Embedding providers and the dense similarity index.

Two providers ship by default: a seeded feature-hashing bag-of-words embedder
(no model weights, fully deterministic) and a remote HTTP embedding client.
The index is an exact cosine scan: vectors are unit-normalized and scored by
inner product, with ties broken by ascending doc id.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .corpus import Corpus, Document, contains_answer

logger = logging.getLogger(__name__)

INDEX_FORMAT = "leanrag-index"
INDEX_VERSION = 1

_WORD_RE = re.compile(r"[a-z0-9]+")


class EmbeddingProviderError(RuntimeError):
    """Provider failure (network, protocol). Safe to retry."""

    retryable = True


class IndexIntegrityError(RuntimeError):
    """A persisted index is inconsistent with itself or with the provider."""


class EmbeddingProvider(Protocol):
    dim: int
    fingerprint: str

    def embed_many(self, texts: Sequence[str]) -> np.ndarray: ...

    def embed(self, text: str) -> np.ndarray: ...


class HashingEmbedder:
    """Signed feature-hashing bag-of-words embedder.

    Deterministic for a given (dim, seed); output rows are unit-normalized.
    Intended for tests and desk-scale runs where no model weights are wanted.
    """

    def __init__(self, dim: int = 256, seed: int = 0):
        if dim < 2:
            raise ValueError("dim must be >= 2")
        self.dim = dim
        self.seed = seed
        self._key = int(seed).to_bytes(8, "little", signed=False)
        self.fingerprint = f"hash-bow:v1:dim={dim}:seed={seed}"

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for row, text in enumerate(texts):
            stripped = text.strip()
            if not stripped:
                raise ValueError("cannot embed empty text")
            vec = out[row]
            for token in _WORD_RE.findall(stripped.lower()):
                h = self._hash(token)
                sign = 1.0 if (h >> 63) & 1 == 0 else -1.0
                vec[h % self.dim] += sign
            norm = np.linalg.norm(vec)
            if norm == 0.0:
                # pathological sign cancellation: fall back to a one-hot
                vec[self._hash(stripped.lower()) % self.dim] = 1.0
                norm = 1.0
            vec /= norm
        return out

    def _hash(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8,
                                 key=self._key).digest()
        return int.from_bytes(digest, "little")


class RemoteEmbedder:
    """HTTP embedding client: POST {"texts": [...]} -> {"embeddings": [[...]]}.

    The auth token is read from the environment variable named by
    ``token_env``; failures surface as retryable EmbeddingProviderError.
    """

    def __init__(self, endpoint: str, dim: int, timeout: float = 30.0,
                 token_env: str = "LEANRAG_EMBED_TOKEN", session=None):
        self.endpoint = endpoint
        self.dim = dim
        self.timeout = timeout
        self.token_env = token_env
        if session is None:
            import requests

            session = requests.Session()
        self._session = session
        self.fingerprint = f"remote:v1:endpoint={endpoint}:dim={dim}"

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        for text in texts:
            if not text.strip():
                raise ValueError("cannot embed empty text")
        headers = {}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        try:
            response = self._session.post(
                self.endpoint, json={"texts": list(texts)},
                headers=headers, timeout=self.timeout)
            status = getattr(response, "status_code", 200)
            if status >= 400:
                raise EmbeddingProviderError(
                    f"embedding endpoint returned HTTP {status}")
            payload = response.json()
            vectors = np.asarray(payload["embeddings"], dtype=np.float64)
        except EmbeddingProviderError:
            raise
        except Exception as exc:
            raise EmbeddingProviderError(f"embedding request failed: {exc}") from exc
        if vectors.shape != (len(texts), self.dim):
            raise EmbeddingProviderError(
                f"expected shape {(len(texts), self.dim)}, got {vectors.shape}")
        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        if np.any(norms == 0) or not np.all(np.isfinite(vectors)):
            raise EmbeddingProviderError("embedding endpoint returned degenerate vectors")
        return vectors / norms


@dataclass(frozen=True)
class RetrievedDoc:
    doc: Document
    similarity: float
    rank: int


def document_embedding_text(doc: Document) -> str:
    """Text fed to the embedder for a document: "title. text"."""
    title = doc.title.strip()
    return f"{title}. {doc.text}" if title else doc.text


class VectorIndex:
    """Exact-scan dense index. Entries are kept sorted by doc_id so that a
    stable sort on similarity yields the documented tie-break for free."""

    def __init__(self, doc_ids: Sequence[str], vectors: np.ndarray,
                 provider_fingerprint: str):
        if len(doc_ids) == 0:
            raise ValueError("cannot build an index over an empty corpus")
        if vectors.ndim != 2 or vectors.shape[0] != len(doc_ids):
            raise ValueError("vectors must be one row per doc id")
        order = sorted(range(len(doc_ids)), key=lambda i: doc_ids[i])
        self.doc_ids = [doc_ids[i] for i in order]
        self.vectors = np.ascontiguousarray(vectors[order], dtype=np.float64)
        self.dim = int(self.vectors.shape[1])
        self.provider_fingerprint = provider_fingerprint

    def __len__(self) -> int:
        return len(self.doc_ids)

    def search(self, query: np.ndarray, k: int) -> list[tuple[str, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        sims = self.vectors @ np.asarray(query, dtype=np.float64)
        order = np.argsort(-sims, kind="stable")[:k]
        return [(self.doc_ids[i], float(sims[i])) for i in order]

    def verify_provider(self, provider: EmbeddingProvider) -> None:
        if provider.fingerprint != self.provider_fingerprint:
            raise IndexIntegrityError(
                f"index built with {self.provider_fingerprint!r}, "
                f"provider is {provider.fingerprint!r}")
        if provider.dim != self.dim:
            raise IndexIntegrityError(
                f"index dim {self.dim} != provider dim {provider.dim}")

    def save(self, path: str | Path) -> None:
        payload = {
            "format": INDEX_FORMAT,
            "version": INDEX_VERSION,
            "dim": self.dim,
            "provider_fingerprint": self.provider_fingerprint,
            "entries": [
                {"doc_id": doc_id, "vector": vec.tolist()}
                for doc_id, vec in zip(self.doc_ids, self.vectors)
            ],
        }
        Path(path).write_text(json.dumps(payload), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "VectorIndex":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if payload.get("format") != INDEX_FORMAT:
            raise IndexIntegrityError(f"{path}: not a {INDEX_FORMAT} file")
        dim = int(payload["dim"])
        doc_ids = []
        rows = []
        for entry in payload["entries"]:
            vec = entry["vector"]
            if len(vec) != dim:
                raise IndexIntegrityError(
                    f"{path}: vector for {entry['doc_id']!r} has dim "
                    f"{len(vec)}, expected {dim}")
            doc_ids.append(entry["doc_id"])
            rows.append(vec)
        return cls(doc_ids, np.asarray(rows, dtype=np.float64),
                   payload["provider_fingerprint"])


def build_index(corpus: Corpus, provider: EmbeddingProvider) -> VectorIndex:
    """Embed every document ("title. text") into a fresh index."""
    if len(corpus) == 0:
        raise ValueError("cannot build an index over an empty corpus")
    docs = list(corpus)
    texts = [document_embedding_text(d) for d in docs]
    vectors = provider.embed_many(texts)
    return VectorIndex([d.doc_id for d in docs], vectors,
                       provider.fingerprint + "|fields=title+text")


class Retriever:
    """Binds a corpus, its index, and the query-side embedding provider."""

    def __init__(self, corpus: Corpus, index: VectorIndex,
                 provider: EmbeddingProvider):
        self.corpus = corpus
        self.index = index
        self.provider = provider

    def retrieve(self, question: str, k: int = 100) -> list[RetrievedDoc]:
        """Top-k documents by cosine similarity, rank 1 first."""
        hits = self.index.search(self.provider.embed(question), k)
        return [
            RetrievedDoc(doc=self.corpus.get(doc_id), similarity=sim, rank=rank)
            for rank, (doc_id, sim) in enumerate(hits, start=1)
        ]


def recall_at_k(results: Sequence[RetrievedDoc], gold_answers: Iterable[str],
                k: int) -> float:
    """1.0 if any of the top-k results contains a gold answer, else 0.0."""
    if k < 1 or k > len(results):
        raise ValueError(f"k={k} out of range for {len(results)} results")
    answers = list(gold_answers)
    for result in results[:k]:
        if contains_answer(result.doc.text, answers):
            return 1.0
    return 0.0


def mean_recall_at_k(per_question: Sequence[Sequence[RetrievedDoc]],
                     golds: Sequence[Iterable[str]], k: int) -> float:
    """Mean of per-question recall@k; k is clamped per question."""
    if not per_question:
        raise ValueError("no questions")
    total = 0.0
    for results, answers in zip(per_question, golds):
        total += recall_at_k(results, answers, min(k, len(results)))
    return total / len(per_question)
