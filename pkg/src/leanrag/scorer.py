"""Two-headed document scorer and its imbalance-aware training loop.

A frozen embedding provider turns (question, document) into features; a small
MLP head emits two logits — answer presence and LLM preference. Training pairs
whose two labels agree ("matched") vastly outnumber the rest, so each
example's loss is weighted f(w) = w for matched, 1 - w for mismatched, and w
itself is learned by hypergradient descent: after each parameter update the
derivative of the held-out validation objective with respect to w is followed
downhill.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .corpus import Document, QARecord, Tokenizer, contains_answer
from .llm import (DEFAULT_TEMPLATES, LlmClient, PromptTemplate,
                  build_retrieve_prompt, is_correct)
from .mlp import Mlp, PROB_EPS, sigmoid
from .retrieval import EmbeddingProvider, Retriever
from .seeds import derive_rng, derive_seed

logger = logging.getLogger(__name__)

SCORER_FORMAT = "leanrag-scorer"
SCORER_VERSION = 1

DEFAULT_HIDDEN_SIZES = (64, 32)


class AnnotationError(RuntimeError):
    def __init__(self, question_id: str, doc_id: str, cause: Exception):
        super().__init__(f"annotation failed for question {question_id!r}, "
                         f"doc {doc_id!r}: {cause}")
        self.question_id = question_id
        self.doc_id = doc_id
        self.cause = cause


class TrainingError(RuntimeError):
    """Training produced a non-finite gradient or loss."""


class ImbalanceDegenerateError(ValueError):
    """Training data (or a validation split) lacks matched or mismatched pairs."""


@dataclass(frozen=True)
class BiLabel:
    has_answer: int
    llm_prefer: int

    def __post_init__(self):
        for value in (self.has_answer, self.llm_prefer):
            if value not in (0, 1):
                raise ValueError(f"labels must be 0 or 1, got {value!r}")

    @property
    def matched(self) -> bool:
        return self.has_answer == self.llm_prefer


@dataclass(frozen=True)
class BiLabelScore:
    logit_ans: float
    logit_pref: float
    p_ans: float
    p_pref: float

    @property
    def combined(self) -> float:
        return self.p_ans + self.p_pref


@dataclass
class LabeledPair:
    question_id: str
    doc_id: str
    features: np.ndarray
    label: BiLabel
    matched: bool

    def __post_init__(self):
        if self.matched != self.label.matched:
            raise ValueError("matched flag inconsistent with label")


@dataclass
class TrainingSet:
    """Annotated pairs plus the imbalance bookkeeping the trainer needs."""

    pairs: list[LabeledPair]
    annotation_failures: int = 0

    @property
    def matched_count(self) -> int:
        return sum(1 for p in self.pairs if p.matched)

    @property
    def mismatched_count(self) -> int:
        return len(self.pairs) - self.matched_count

    @property
    def imbalance_ratio(self) -> float:
        """matched : mismatched ratio (inf when nothing is mismatched)."""
        mismatched = self.mismatched_count
        if mismatched == 0:
            return float("inf")
        return self.matched_count / mismatched

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            for pair in self.pairs:
                handle.write(json.dumps({
                    "question_id": pair.question_id,
                    "doc_id": pair.doc_id,
                    "features": pair.features.tolist(),
                    "has_answer": pair.label.has_answer,
                    "llm_prefer": pair.label.llm_prefer,
                }) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TrainingSet":
        pairs = []
        with open(path, encoding="utf-8") as handle:
            for line in handle:
                if not line.strip():
                    continue
                rec = json.loads(line)
                label = BiLabel(rec["has_answer"], rec["llm_prefer"])
                pairs.append(LabeledPair(
                    question_id=rec["question_id"], doc_id=rec["doc_id"],
                    features=np.asarray(rec["features"], dtype=np.float64),
                    label=label, matched=label.matched))
        return cls(pairs=pairs)


def pair_features(provider: EmbeddingProvider, question: str,
                  doc_text: str) -> np.ndarray:
    """Question embedding concatenated with the document-text embedding."""
    return np.concatenate([provider.embed(question), provider.embed(doc_text)])


def annotate_training_pair(qa: QARecord, doc: Document, llm: LlmClient,
                           template: PromptTemplate | None = None,
                           tokenizer: Tokenizer | None = None) -> BiLabel:
    """Label one (question, document) pair.

    has_answer: the document text contains a gold answer. llm_prefer: the LLM
    answers correctly when the document is appended to the question (the
    prompt used is kept in the client transcript where the client records one).
    """
    has_answer = int(contains_answer(doc.text, qa.gold_answers))
    request = build_retrieve_prompt(qa.question, [doc.text],
                                    template or DEFAULT_TEMPLATES["comprehensive"],
                                    tokenizer)
    try:
        response = llm.complete(request)
    except Exception as exc:
        raise AnnotationError(qa.question_id, doc.doc_id, exc) from exc
    llm_prefer = int(is_correct(response.text, qa.gold_answers))
    return BiLabel(has_answer=has_answer, llm_prefer=llm_prefer)


def build_training_set(qa_records: Sequence[QARecord], retriever: Retriever,
                       llm: LlmClient, per_question_k: int = 50,
                       template: PromptTemplate | None = None,
                       tokenizer: Tokenizer | None = None) -> TrainingSet:
    """Retrieve top-k documents per question and annotate every pair.

    Individual annotation failures are logged and counted, not fatal.
    """
    provider = retriever.provider
    doc_vectors: dict[str, np.ndarray] = {}
    pairs: list[LabeledPair] = []
    failures = 0
    for qa in qa_records:
        question_vec = provider.embed(qa.question)
        for result in retriever.retrieve(qa.question, per_question_k):
            doc = result.doc
            try:
                label = annotate_training_pair(qa, doc, llm, template, tokenizer)
            except AnnotationError as exc:
                failures += 1
                logger.warning("skipping pair: %s", exc)
                continue
            if doc.doc_id not in doc_vectors:
                doc_vectors[doc.doc_id] = provider.embed(doc.text)
            features = np.concatenate([question_vec, doc_vectors[doc.doc_id]])
            pairs.append(LabeledPair(
                question_id=qa.question_id, doc_id=doc.doc_id,
                features=features, label=label, matched=label.matched))
    training_set = TrainingSet(pairs=pairs, annotation_failures=failures)
    logger.info("built %d pairs (%d matched : %d mismatched, ratio %.2f, "
                "%d failures)", len(pairs), training_set.matched_count,
                training_set.mismatched_count, training_set.imbalance_ratio,
                failures)
    return training_set


def bce_loss(score: BiLabelScore, label: BiLabel) -> float:
    """Binary cross-entropy summed over the two heads, probabilities clamped."""
    total = 0.0
    for p, y in ((score.p_ans, label.has_answer), (score.p_pref, label.llm_prefer)):
        p = min(max(p, PROB_EPS), 1.0 - PROB_EPS)
        total -= y * np.log(p) + (1 - y) * np.log(1.0 - p)
    return float(total)


def pairs_to_arrays(pairs: Sequence[LabeledPair]):
    """(features, targets, matched mask) as dense arrays."""
    features = np.stack([p.features for p in pairs])
    targets = np.array([[p.label.has_answer, p.label.llm_prefer] for p in pairs],
                       dtype=np.float64)
    matched = np.array([p.matched for p in pairs], dtype=bool)
    return features, targets, matched


def match_weights(matched: np.ndarray, weight: float) -> np.ndarray:
    """f(w): w for matched examples, 1 - w for mismatched ones."""
    return np.where(matched, weight, 1.0 - weight)


def weighted_loss(head: Mlp, params: np.ndarray, features: np.ndarray,
                  targets: np.ndarray, matched: np.ndarray,
                  weight: float) -> float:
    """Mean over the batch of f(w) * example loss."""
    loss, _ = head.weighted_bce(params, features, targets,
                                match_weights(matched, weight), len(features))
    return loss


def train_step(head: Mlp, params: np.ndarray, features: np.ndarray,
               targets: np.ndarray, matched: np.ndarray, weight: float,
               learning_rate: float) -> np.ndarray:
    """One gradient-descent step on the f(w)-weighted batch loss."""
    if learning_rate < 0:
        raise ValueError("learning_rate must be >= 0")
    _, grad = head.weighted_bce(params, features, targets,
                                match_weights(matched, weight), len(features))
    if not np.all(np.isfinite(grad)):
        raise TrainingError("non-finite gradient")
    return params - learning_rate * grad


def split_losses(head: Mlp, params: np.ndarray, features: np.ndarray,
                 targets: np.ndarray, matched: np.ndarray):
    """Validation losses per split, each normalized by its own split size."""
    out = []
    for mask in (matched, ~matched):
        if not mask.any():
            raise ImbalanceDegenerateError("validation split is single-class")
        loss, _ = head.weighted_bce(params, features[mask], targets[mask],
                                    np.ones(int(mask.sum())), int(mask.sum()))
        out.append(loss)
    return out[0], out[1]


def hyper_direction(head: Mlp, params_before: np.ndarray,
                    params_after: np.ndarray, train_features: np.ndarray,
                    train_targets: np.ndarray, train_matched: np.ndarray,
                    val_features: np.ndarray, val_targets: np.ndarray,
                    val_matched: np.ndarray,
                    learning_rate: float) -> tuple[float, float, float]:
    """Derivative of each validation split's loss with respect to the balance
    weight, following the parameter update one step back.

    The update moves parameters by -lr * (w * g_mat + (1-w) * g_mis), so the
    chain rule gives d loss_v / dw = -lr * grad_v(after) . (g_mat - g_mis),
    where g_mat/g_mis are the per-split training gradients (normalized by the
    full training-set size) at the pre-update parameters. Returns
    (d_matched, d_mismatched, common direction = their mean).
    """
    if not train_matched.any() or train_matched.all():
        raise ImbalanceDegenerateError("training data is single-class")
    n_train = len(train_features)
    _, g_mat = head.weighted_bce(params_before, train_features, train_targets,
                                 train_matched.astype(np.float64), n_train)
    _, g_mis = head.weighted_bce(params_before, train_features, train_targets,
                                 (~train_matched).astype(np.float64), n_train)
    diff = g_mat - g_mis
    directions = []
    for mask in (val_matched, ~val_matched):
        if not mask.any():
            raise ImbalanceDegenerateError("validation split is single-class")
        count = int(mask.sum())
        _, grad_v = head.weighted_bce(params_after, val_features[mask],
                                      val_targets[mask], np.ones(count), count)
        directions.append(-learning_rate * float(grad_v @ diff))
    d_mat, d_mis = directions
    return d_mat, d_mis, (d_mat + d_mis) / 2.0


def hypergradient_step(head: Mlp, params_before: np.ndarray,
                       params_after: np.ndarray, train_features: np.ndarray,
                       train_targets: np.ndarray, train_matched: np.ndarray,
                       val_features: np.ndarray, val_targets: np.ndarray,
                       val_matched: np.ndarray, weight: float,
                       learning_rate: float, step_size: float) -> float:
    """Move the balance weight along the common descent direction, clamped
    to [0, 1]."""
    _, _, common = hyper_direction(head, params_before, params_after,
                                   train_features, train_targets, train_matched,
                                   val_features, val_targets, val_matched,
                                   learning_rate)
    return float(np.clip(weight - step_size * common, 0.0, 1.0))


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    hyper_step_size: float = 1.0
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    initial_weight: float = 0.5
    val_fraction: float = 0.1
    # above this many training pairs the hypergradient's full-split gradients
    # are evaluated on a fixed seeded subsample per epoch
    full_grad_max: int = 10_000


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_matched_loss: float
    val_mismatched_loss: float
    weight: float


@dataclass
class ScorerModel:
    """Frozen encoder reference plus the trained two-head MLP."""

    head: Mlp
    balance_weight: float
    seed: int
    provider: EmbeddingProvider | None = None
    provider_fingerprint: str | None = None

    def score_features(self, features: np.ndarray) -> BiLabelScore:
        logits = self.head.forward_logits(features.reshape(1, -1))[0]
        probs = sigmoid(logits)
        return BiLabelScore(logit_ans=float(logits[0]), logit_pref=float(logits[1]),
                            p_ans=float(probs[0]), p_pref=float(probs[1]))

    def score(self, question: str, doc_text: str) -> BiLabelScore:
        if self.provider is None:
            raise ValueError("model has no embedding provider attached")
        return self.score_features(pair_features(self.provider, question, doc_text))

    def save(self, path: str | Path) -> None:
        payload = {
            "format": SCORER_FORMAT,
            "version": SCORER_VERSION,
            "architecture": {"layer_sizes": list(self.head.layer_sizes)},
            "params": self.head.get_params().tolist(),
            "balance_weight": self.balance_weight,
            "provider_fingerprint": self.provider_fingerprint,
            "seed": self.seed,
        }
        Path(path).write_text(json.dumps(payload), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path,
             provider: EmbeddingProvider | None = None) -> "ScorerModel":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if payload.get("format") != SCORER_FORMAT:
            raise ValueError(f"{path}: not a {SCORER_FORMAT} file")
        fingerprint = payload.get("provider_fingerprint")
        if provider is not None and fingerprint is not None \
                and provider.fingerprint != fingerprint:
            raise ValueError(
                f"model trained with provider {fingerprint!r}, "
                f"got {provider.fingerprint!r}")
        head = Mlp(payload["architecture"]["layer_sizes"], seed=payload["seed"])
        head.set_params(np.asarray(payload["params"], dtype=np.float64))
        return cls(head=head, balance_weight=float(payload["balance_weight"]),
                   seed=int(payload["seed"]), provider=provider,
                   provider_fingerprint=fingerprint)


def score(model: ScorerModel, question: str, doc_text: str) -> BiLabelScore:
    return model.score(question, doc_text)


class TrainResult(NamedTuple):
    model: ScorerModel
    balance_weight: float
    history: list[EpochStats]


def stratified_split(matched: np.ndarray, val_fraction: float,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays (train, validation), stratified on the matched flag.

    Each stratum contributes at least one validation example.
    """
    train_idx: list[int] = []
    val_idx: list[int] = []
    for mask in (matched, ~matched):
        stratum = np.flatnonzero(mask)
        if len(stratum) < 2:
            raise ImbalanceDegenerateError(
                "need at least 2 examples per class to split off validation")
        stratum = rng.permutation(stratum)
        n_val = max(1, int(round(len(stratum) * val_fraction)))
        n_val = min(n_val, len(stratum) - 1)
        val_idx.extend(stratum[:n_val])
        train_idx.extend(stratum[n_val:])
    return np.sort(np.array(train_idx)), np.sort(np.array(val_idx))


def train_scorer(pairs: Sequence[LabeledPair] | TrainingSet,
                 config: TrainConfig | None = None,
                 hidden_sizes: Sequence[int] = DEFAULT_HIDDEN_SIZES,
                 provider: EmbeddingProvider | None = None) -> TrainResult:
    """Alternate parameter updates and balance-weight updates.

    Each epoch runs seeded mini-batch steps over the training split, then one
    hypergradient step on the balance weight using the epoch's start and end
    parameters with per-split gradients over the full training split (or a
    fixed seeded subsample above ``full_grad_max`` pairs). Deterministic for
    a fixed config.
    """
    if isinstance(pairs, TrainingSet):
        pairs = pairs.pairs
    config = config or TrainConfig()
    if not pairs:
        raise ValueError("no training pairs")
    features, targets, matched = pairs_to_arrays(pairs)
    if matched.all() or not matched.any():
        raise ImbalanceDegenerateError(
            "training data needs both matched and mismatched pairs")

    split_rng = derive_rng(config.seed, "scorer.split")
    train_idx, val_idx = stratified_split(matched, config.val_fraction, split_rng)
    x_t, y_t, m_t = features[train_idx], targets[train_idx], matched[train_idx]
    x_v, y_v, m_v = features[val_idx], targets[val_idx], matched[val_idx]

    head = Mlp([features.shape[1], *hidden_sizes, 2],
               seed=derive_seed(config.seed, "scorer.init"))
    params = head.get_params()
    weight = float(config.initial_weight)
    batch_rng = derive_rng(config.seed, "scorer.batches")
    sample_rng = derive_rng(config.seed, "scorer.hypergrad-subsample")

    history: list[EpochStats] = []
    n_train = len(x_t)
    for epoch in range(1, config.epochs + 1):
        params_start = params
        order = batch_rng.permutation(n_train)
        for lo in range(0, n_train, config.batch_size):
            batch = order[lo:lo + config.batch_size]
            params = train_step(head, params, x_t[batch], y_t[batch],
                                m_t[batch], weight, config.learning_rate)
        if config.hyper_step_size != 0.0:
            if n_train > config.full_grad_max:
                sub = np.sort(sample_rng.choice(n_train, config.full_grad_max,
                                                replace=False))
                hx, hy, hm = x_t[sub], y_t[sub], m_t[sub]
                if hm.all() or not hm.any():
                    hx, hy, hm = x_t, y_t, m_t
            else:
                hx, hy, hm = x_t, y_t, m_t
            weight = hypergradient_step(head, params_start, params, hx, hy, hm,
                                        x_v, y_v, m_v, weight,
                                        config.learning_rate,
                                        config.hyper_step_size)
        train_loss = weighted_loss(head, params, x_t, y_t, m_t, weight)
        val_mat, val_mis = split_losses(head, params, x_v, y_v, m_v)
        history.append(EpochStats(epoch=epoch, train_loss=train_loss,
                                  val_matched_loss=val_mat,
                                  val_mismatched_loss=val_mis, weight=weight))

    head.set_params(params)
    model = ScorerModel(head=head, balance_weight=weight, seed=config.seed,
                        provider=provider,
                        provider_fingerprint=getattr(provider, "fingerprint", None))
    return TrainResult(model=model, balance_weight=weight, history=history)
