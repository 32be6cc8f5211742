"""Retrieval-skip decisions from two facet scores.

A question skips retrieval only when (a) enough of its retrieved documents
get a confidently-positive answer-presence score and (b) enough of its
nearest labeled neighbor questions were answered correctly without retrieval.
Both thresholds are strict.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import QARecord, Tokenizer
from .llm import (DEFAULT_TEMPLATES, LlmClient, PromptTemplate,
                  build_noretrieve_prompt, is_correct)
from .retrieval import EmbeddingProvider, RetrievedDoc
from .scorer import BiLabelScore

logger = logging.getLogger(__name__)

NNREF_FORMAT = "leanrag-nnref"
NNREF_VERSION = 1

LABEL_CORRECT = "correct_w/o_retrieve"
LABEL_INCORRECT = "incorrect_w/o_retrieve"


class Decision(str, Enum):
    RETRIEVE = "Retrieve"
    NO_RETRIEVE = "No_Retrieve"


@dataclass(frozen=True)
class RecognizerConfig:
    # threshold on the answer-presence head; applied to the raw logit, since a
    # useful cutoff above 1 cannot be a probability. Set threshold_on_probability
    # for sensitivity studies.
    delta_ltod: float = 4.5
    s_l: float = 0.04
    s_n: float = 0.67
    k_neighbors: int = 10
    threshold_on_probability: bool = False

    def __post_init__(self):
        if not 0.0 <= self.s_l <= 1.0 or not 0.0 <= self.s_n <= 1.0:
            raise ValueError("s_l and s_n must be in [0, 1]")
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "RecognizerConfig":
        known = {k: mapping[k] for k in
                 ("delta_ltod", "s_l", "s_n", "k_neighbors",
                  "threshold_on_probability") if k in mapping}
        return cls(**known)


@dataclass(frozen=True)
class RecognizerVerdict:
    s_ltod: float
    s_nn: float
    decision: Decision


@dataclass(frozen=True)
class NnEntry:
    question_id: str
    embedding: np.ndarray
    correct: bool


class NnReferenceSet:
    """Labeled question embeddings for the nearest-neighbor facet."""

    def __init__(self, entries: Sequence[NnEntry],
                 provider_fingerprint: str | None = None):
        dims = {e.embedding.shape for e in entries}
        if len(dims) > 1:
            raise ValueError(f"mixed embedding shapes: {dims}")
        self.entries = list(entries)
        self.provider_fingerprint = provider_fingerprint

    def __len__(self) -> int:
        return len(self.entries)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(json.dumps({
                "_meta": {"format": NNREF_FORMAT, "version": NNREF_VERSION,
                          "provider_fingerprint": self.provider_fingerprint},
            }) + "\n")
            for entry in self.entries:
                handle.write(json.dumps({
                    "question_id": entry.question_id,
                    "label": LABEL_CORRECT if entry.correct else LABEL_INCORRECT,
                    "embedding": entry.embedding.tolist(),
                }) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "NnReferenceSet":
        entries = []
        fingerprint = None
        with open(path, encoding="utf-8") as handle:
            for line in handle:
                if not line.strip():
                    continue
                record = json.loads(line)
                if "_meta" in record:
                    fingerprint = record["_meta"].get("provider_fingerprint")
                    continue
                entries.append(NnEntry(
                    question_id=record["question_id"],
                    embedding=np.asarray(record["embedding"], dtype=np.float64),
                    correct=record["label"] == LABEL_CORRECT))
        return cls(entries, fingerprint)


def build_nn_reference(qa_records: Sequence[QARecord], llm: LlmClient,
                       provider: EmbeddingProvider,
                       template: PromptTemplate | None = None,
                       tokenizer: Tokenizer | None = None) -> NnReferenceSet:
    """Ask every question without retrieval and label it by containment
    correctness. LLM failures skip the question with a warning."""
    template = template or DEFAULT_TEMPLATES["no_retrieve"]
    entries = []
    for qa in qa_records:
        request = build_noretrieve_prompt(qa.question, template, tokenizer)
        try:
            response = llm.complete(request)
        except Exception as exc:
            logger.warning("skipping question %s in reference set: %s",
                           qa.question_id, exc)
            continue
        entries.append(NnEntry(
            question_id=qa.question_id,
            embedding=provider.embed(qa.question),
            correct=is_correct(response.text, qa.gold_answers)))
    return NnReferenceSet(entries, provider.fingerprint)


def long_tail_score(scored_docs: Sequence[tuple[RetrievedDoc, BiLabelScore]],
                    delta_ltod: float,
                    on_probability: bool = False) -> float:
    """Fraction of retrieved documents whose answer-presence output exceeds
    the cutoff. Order-invariant; undefined (raises) on empty input."""
    if not scored_docs:
        raise ValueError("cannot score an empty retrieved set")
    hits = 0
    for _, sc in scored_docs:
        value = sc.p_ans if on_probability else sc.logit_ans
        if value > delta_ltod:
            hits += 1
    return hits / len(scored_docs)


def neighbor_score(question_embedding: np.ndarray, reference: NnReferenceSet,
                   k: int) -> float:
    """Fraction of the k nearest reference questions (Euclidean distance,
    ties by ascending question id) answered correctly without retrieval."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(reference) < k:
        raise ValueError(f"reference set has {len(reference)} entries, need >= {k}")
    query = np.asarray(question_embedding, dtype=np.float64)
    ranked = sorted(
        reference.entries,
        key=lambda e: (float(np.linalg.norm(e.embedding - query)), e.question_id))
    top = ranked[:k]
    return sum(1 for e in top if e.correct) / k


def decide(s_ltod_value: float, s_nn_value: float,
           config: RecognizerConfig) -> RecognizerVerdict:
    """Skip retrieval only when both facet scores strictly exceed their
    thresholds."""
    for value in (s_ltod_value, s_nn_value):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"facet scores must be in [0, 1], got {value}")
    skip = s_ltod_value > config.s_l and s_nn_value > config.s_n
    return RecognizerVerdict(
        s_ltod=s_ltod_value, s_nn=s_nn_value,
        decision=Decision.NO_RETRIEVE if skip else Decision.RETRIEVE)
