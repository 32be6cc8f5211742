"""End-to-end inference and the evaluation harness.

Per question: retrieve the top candidates, score every candidate with the
two-head scorer, compute the two self-knowledge facet scores, and either
answer from internal knowledge (no passages) or compress the candidates into
a sub-document combination and answer with it. The harness aggregates
accuracy, recall@K under several orderings, token accounting, and the
retrieval skip rate, and supports ablation flags.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import (Corpus, QARecord, Tokenizer, load_corpus,
                     whole_document_subdoc)
from .llm import (DEFAULT_TEMPLATES, HttpLlmClient, LlmClient, LlmTransportError,
                  PromptTemplate, ScriptedLlmClient, build_noretrieve_prompt,
                  build_retrieve_prompt, is_correct)
from .recognizer import (Decision, NnReferenceSet, RecognizerConfig,
                         RecognizerVerdict, decide, long_tail_score,
                         neighbor_score)
from .reducer import (DetectorModel, RerankedDoc, ScoredSubDoc,
                      SubDocCombination, make_combination, reduce, rerank_topk)
from .retrieval import (EmbeddingProviderError, HashingEmbedder, RemoteEmbedder,
                        RetrievedDoc, Retriever, VectorIndex, recall_at_k)
from .scorer import BiLabelScore, ScorerModel

logger = logging.getLogger(__name__)

RECALL_KS = (1, 5, 10, 20, 100)
SCORE_ORDERINGS = ("similarity", "has_answer_only", "llm_prefer_only",
                   "bilabel_sum")
KNOWN_ABLATIONS = ("no_recognizer", "no_reducer", "fixed_w")


class PipelineStageError(RuntimeError):
    """An error attributed to a pipeline stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    seed: int = 0
    corpus_path: str | None = None
    index_path: str | None = None
    scorer_path: str | None = None
    detector_path: str | None = None
    nn_ref_path: str | None = None
    top_retrieve: int = 100
    top_rerank: int = 10
    template: str = "comprehensive"
    window: int = 3
    stride: int = 1
    provider: dict = field(default_factory=lambda: {"kind": "hash", "dim": 256})
    recognizer: dict = field(default_factory=dict)
    llm: dict = field(default_factory=dict)
    templates: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.top_rerank > self.top_retrieve:
            raise ValueError("top_rerank must be <= top_retrieve")

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class PipelineContext:
    """Everything answer_question needs, loaded and immutable."""

    corpus: Corpus
    retriever: Retriever
    scorer: ScorerModel
    recognizer_config: RecognizerConfig
    llm: LlmClient
    detector: DetectorModel | None = None
    nn_reference: NnReferenceSet | None = None
    templates: Mapping[str, PromptTemplate] = field(
        default_factory=lambda: dict(DEFAULT_TEMPLATES))
    top_retrieve: int = 100
    top_rerank: int = 10
    template_name: str = "comprehensive"
    window: int = 3
    stride: int = 1
    tokenizer: Tokenizer | None = None
    seed: int = 0
    fixed_w_scorer: ScorerModel | None = None
    max_workers: int = 1


def _template_overrides(overrides: Mapping) -> dict[str, PromptTemplate]:
    templates = dict(DEFAULT_TEMPLATES)
    for name, spec in overrides.items():
        base = templates.get(name, PromptTemplate(name=name, instruction=""))
        templates[name] = PromptTemplate(
            name=name,
            instruction=spec.get("instruction", base.instruction),
            passage_header=spec.get("passage_header", base.passage_header),
            passage_line=spec.get("passage_line", base.passage_line),
            question_line=spec.get("question_line", base.question_line),
            suffix=spec.get("suffix", base.suffix))
    return templates


def build_provider(spec: Mapping):
    kind = spec.get("kind", "hash")
    if kind == "hash":
        return HashingEmbedder(dim=int(spec.get("dim", 256)),
                               seed=int(spec.get("seed", 0)))
    if kind == "remote":
        return RemoteEmbedder(endpoint=spec["endpoint"], dim=int(spec["dim"]),
                              timeout=float(spec.get("timeout", 30.0)),
                              token_env=spec.get("token_env",
                                                 "LEANRAG_EMBED_TOKEN"))
    raise ValueError(f"unknown provider kind {kind!r}")


def build_llm_client(spec: Mapping) -> LlmClient:
    kind = spec.get("kind", "mock")
    if kind == "mock":
        path = spec.get("script_path")
        if path is None:
            raise ValueError("mock llm config needs script_path")
        return ScriptedLlmClient.from_script_file(
            path, default_answer=spec.get("default_answer"))
    if kind == "remote":
        return HttpLlmClient(endpoint=spec["endpoint"],
                             timeout=float(spec.get("timeout", 60.0)),
                             retries=int(spec.get("retries", 2)),
                             backoff=float(spec.get("backoff", 0.5)),
                             max_tokens=int(spec.get("max_tokens", 256)),
                             token_env=spec.get("token_env",
                                                "LEANRAG_LLM_TOKEN"))
    raise ValueError(f"unknown llm kind {kind!r}")


def load_pipeline(config: PipelineConfig,
                  require: Iterable[str] = ("corpus", "index", "scorer")
                  ) -> PipelineContext:
    """Assemble a context from the files a config points at. ``require``
    names the artifacts that must be present ("corpus", "index", "scorer",
    "detector", "nn_ref", "llm")."""
    require = set(require)
    provider = build_provider(config.provider)

    def _need(name: str, path: str | None) -> str | None:
        required = name in require
        if required and path is None:
            raise ValueError(f"config is missing {name}_path")
        if path is not None and not Path(path).exists():
            if required:
                raise FileNotFoundError(f"{name} file not found: {path}")
            return None  # optional artifact not built yet
        return path

    corpus_path = _need("corpus", config.corpus_path)
    corpus = load_corpus(corpus_path) if corpus_path else None
    index_path = _need("index", config.index_path)
    index = VectorIndex.load(index_path) if index_path else None
    retriever = (Retriever(corpus, index, provider)
                 if index is not None and corpus is not None else None)

    scorer_path = _need("scorer", config.scorer_path)
    scorer = ScorerModel.load(scorer_path, provider) if scorer_path else None

    detector_path = _need("detector", config.detector_path)
    detector = DetectorModel.load(detector_path) if detector_path else None

    nn_path = _need("nn_ref", config.nn_ref_path)
    nn_reference = NnReferenceSet.load(nn_path) if nn_path else None

    llm = build_llm_client(config.llm) if (config.llm or "llm" in require) else None
    return PipelineContext(
        corpus=corpus, retriever=retriever, scorer=scorer,
        recognizer_config=RecognizerConfig.from_mapping(config.recognizer),
        llm=llm, detector=detector, nn_reference=nn_reference,
        templates=_template_overrides(config.templates),
        top_retrieve=config.top_retrieve, top_rerank=config.top_rerank,
        template_name=config.template, window=config.window,
        stride=config.stride, seed=config.seed,
        max_workers=int(config.llm.get("concurrency", 1)) if config.llm else 1)


@dataclass
class AnswerTrace:
    question_id: str
    question: str
    verdict: RecognizerVerdict
    combination: SubDocCombination | None
    prompt_tokens: int
    response_text: str
    correct: bool | None
    timings: dict[str, float]

    def to_dict(self, include_timings: bool = True) -> dict:
        data = {
            "question_id": self.question_id,
            "question": self.question,
            "verdict": {
                "s_ltod": self.verdict.s_ltod,
                "s_nn": self.verdict.s_nn,
                "decision": self.verdict.decision.value,
            },
            "combination": None if self.combination is None else {
                "member_subdoc_ids": list(self.combination.member_ids()),
                "token_count": self.combination.token_count,
            },
            "prompt_tokens": self.prompt_tokens,
            "response_text": self.response_text,
            "correct": self.correct,
        }
        if include_timings:
            data["timings"] = self.timings
        return data


def _whole_doc_combination(reranked: Sequence[RerankedDoc],
                           tokenizer: Tokenizer | None,
                           max_docs: int) -> SubDocCombination:
    members = [
        ScoredSubDoc(subdoc=whole_document_subdoc(d.doc, tokenizer),
                     score=d.score, combined=d.combined,
                     parent_position=d.position)
        for d in reranked
    ]
    return make_combination(members, max(max_docs, len(members)))


def _answer_with_details(qa: QARecord | str, ctx: PipelineContext,
                         ablations: frozenset[str] = frozenset(),
                         template_name: str | None = None):
    if isinstance(qa, str):
        record: QARecord | None = None
        question = qa
        question_id = f"adhoc-{abs(hash(qa)) % 10 ** 8}"
    else:
        record = qa
        question = qa.question
        question_id = qa.question_id
    template = ctx.templates[template_name or ctx.template_name]
    timings: dict[str, float] = {}

    def _timed(stage: str, fn, *args, **kwargs):
        start = time.perf_counter()
        try:
            result = fn(*args, **kwargs)
        except PipelineStageError:
            raise
        except Exception as exc:
            raise PipelineStageError(stage, exc) from exc
        timings[stage] = time.perf_counter() - start
        return result

    retrieved = _timed("retrieve", ctx.retriever.retrieve, question,
                       ctx.top_retrieve)
    scored = _timed("score", lambda: [
        (r, ctx.scorer.score(question, r.doc.text)) for r in retrieved])

    def _recognize() -> RecognizerVerdict:
        if "no_recognizer" in ablations:
            return RecognizerVerdict(s_ltod=0.0, s_nn=0.0,
                                     decision=Decision.RETRIEVE)
        cfg = ctx.recognizer_config
        ltod = long_tail_score(scored, cfg.delta_ltod,
                               cfg.threshold_on_probability)
        if ctx.nn_reference is None:
            raise ValueError("recognizer requires a nearest-neighbor reference "
                             "set (or the no_recognizer ablation)")
        nn = neighbor_score(ctx.retriever.provider.embed(question),
                            ctx.nn_reference, cfg.k_neighbors)
        return decide(ltod, nn, cfg)

    verdict = _timed("recognize", _recognize)

    combination: SubDocCombination | None = None
    if verdict.decision is Decision.NO_RETRIEVE:
        request = _timed("prompt", build_noretrieve_prompt, question,
                         ctx.templates["no_retrieve"], ctx.tokenizer)
    else:
        if "no_reducer" in ablations:
            combination = _timed(
                "reduce", lambda: _whole_doc_combination(
                    rerank_topk(scored, ctx.top_rerank), ctx.tokenizer,
                    ctx.top_rerank))
        else:
            if ctx.detector is None:
                raise ValueError("reducer requires a detector model "
                                 "(or the no_reducer ablation)")
            combination = _timed("reduce", reduce, question, scored,
                                 ctx.scorer, ctx.detector, ctx.top_rerank,
                                 ctx.window, ctx.stride, ctx.tokenizer)
        request = _timed("prompt", build_retrieve_prompt, question,
                         combination, template, ctx.tokenizer)

    response = _timed("llm", ctx.llm.complete, request)
    correct = None
    if record is not None:
        correct = is_correct(response.text, record.gold_answers)
    trace = AnswerTrace(question_id=question_id, question=question,
                        verdict=verdict, combination=combination,
                        prompt_tokens=request.token_count,
                        response_text=response.text, correct=correct,
                        timings=timings)
    return trace, scored


def answer_question(qa: QARecord | str, ctx: PipelineContext,
                    ablations: Iterable[str] = (),
                    template_name: str | None = None) -> AnswerTrace:
    trace, _ = _answer_with_details(qa, ctx, frozenset(ablations), template_name)
    return trace


def _ordering_key(name: str):
    if name == "similarity":
        return lambda pair: pair[0].rank
    if name == "has_answer_only":
        return lambda pair: (-pair[1].p_ans, pair[0].rank)
    if name == "llm_prefer_only":
        return lambda pair: (-pair[1].p_pref, pair[0].rank)
    if name == "bilabel_sum":
        return lambda pair: (-pair[1].combined, pair[0].rank)
    raise ValueError(f"unknown ordering {name!r}")


def ordered_docs(scored: Sequence[tuple[RetrievedDoc, BiLabelScore]],
                 ordering: str) -> list[RetrievedDoc]:
    ordered = sorted(scored, key=_ordering_key(ordering))
    return [r for r, _ in ordered]


@dataclass
class EvalReport:
    accuracy: float
    mean_prompt_tokens: float
    recall: dict[str, dict[str, float]]
    retrieval_skip_rate: float
    n_questions: int
    n_excluded: int
    excluded_question_ids: list[str]
    ablations: list[str]
    template: str
    seed: int
    per_question: list[dict]
    sub_reports: dict[str, "EvalReport"] = field(default_factory=dict)

    def to_dict(self) -> dict:
        data = {
            "accuracy": self.accuracy,
            "mean_prompt_tokens": self.mean_prompt_tokens,
            "recall": self.recall,
            "retrieval_skip_rate": self.retrieval_skip_rate,
            "n_questions": self.n_questions,
            "n_excluded": self.n_excluded,
            "excluded_question_ids": self.excluded_question_ids,
            "ablations": self.ablations,
            "template": self.template,
            "seed": self.seed,
            "per_question": self.per_question,
        }
        if self.sub_reports:
            data["sub_reports"] = {name: report.to_dict()
                                   for name, report in self.sub_reports.items()}
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def evaluate(qa_set: Sequence[QARecord], ctx: PipelineContext,
             ablations: Iterable[str] = (),
             ablation_suites: Mapping[str, Iterable[str]] | None = None
             ) -> EvalReport:
    """Run the pipeline over a QA set and aggregate metrics.

    Transport-level failures (LLM or embedding endpoint) exclude the question
    from the denominators and are listed in the report; any other failure
    aborts, since it indicates a broken artifact rather than a flaky network.
    Results are aggregated in input order regardless of worker count, so
    concurrent runs produce reports identical to serial ones.
    """
    if not qa_set:
        raise ValueError("qa_set must be non-empty")
    ablations = frozenset(ablations)
    unknown = {a for a in ablations
               if a not in KNOWN_ABLATIONS and not a.startswith("template=")}
    if unknown:
        raise ValueError(f"unknown ablations: {sorted(unknown)}")
    template_name = None
    for flag in ablations:
        if flag.startswith("template="):
            template_name = flag.split("=", 1)[1]
    run_ctx = ctx
    if "fixed_w" in ablations:
        if ctx.fixed_w_scorer is None:
            raise ValueError("fixed_w ablation requires ctx.fixed_w_scorer")
        run_ctx = _with_scorer(ctx, ctx.fixed_w_scorer)

    def _one(qa: QARecord):
        try:
            return _answer_with_details(qa, run_ctx, ablations, template_name)
        except PipelineStageError as exc:
            if isinstance(exc.cause, (LlmTransportError, EmbeddingProviderError)):
                logger.warning("excluding %s: %s", qa.question_id, exc)
                return exc
            raise

    if run_ctx.max_workers > 1:
        with ThreadPoolExecutor(max_workers=run_ctx.max_workers) as pool:
            outcomes = list(pool.map(_one, qa_set))
    else:
        outcomes = [_one(qa) for qa in qa_set]

    traces: list[AnswerTrace] = []
    scored_lists: list = []
    answered_qa: list[QARecord] = []
    excluded: list[str] = []
    for qa, outcome in zip(qa_set, outcomes):
        if isinstance(outcome, PipelineStageError):
            excluded.append(qa.question_id)
            continue
        trace, scored = outcome
        traces.append(trace)
        scored_lists.append(scored)
        answered_qa.append(qa)

    if not traces:
        raise RuntimeError("every question failed at transport level")

    recall: dict[str, dict[str, float]] = {}
    for ordering in SCORE_ORDERINGS:
        recall[ordering] = {}
        for k in RECALL_KS:
            total = 0.0
            for qa, scored in zip(answered_qa, scored_lists):
                docs = ordered_docs(scored, ordering)
                total += recall_at_k(docs, qa.gold_answers, min(k, len(docs)))
            recall[ordering][str(k)] = total / len(answered_qa)

    n_answered = len(traces)
    accuracy = sum(1 for t in traces if t.correct) / n_answered
    mean_tokens = sum(t.prompt_tokens for t in traces) / n_answered
    skip_rate = sum(1 for t in traces
                    if t.verdict.decision is Decision.NO_RETRIEVE) / n_answered
    per_question = [
        {
            "question_id": t.question_id,
            "correct": bool(t.correct),
            "prompt_tokens": t.prompt_tokens,
            "decision": t.verdict.decision.value,
            "combination_size": None if t.combination is None
            else len(t.combination),
        }
        for t in traces
    ]
    report = EvalReport(
        accuracy=accuracy, mean_prompt_tokens=mean_tokens, recall=recall,
        retrieval_skip_rate=skip_rate, n_questions=len(qa_set),
        n_excluded=len(excluded), excluded_question_ids=excluded,
        ablations=sorted(ablations),
        template=template_name or ctx.template_name, seed=ctx.seed,
        per_question=per_question)

    for name, flags in (ablation_suites or {}).items():
        report.sub_reports[name] = evaluate(qa_set, ctx, flags)
    return report


def _with_scorer(ctx: PipelineContext, scorer: ScorerModel) -> PipelineContext:
    from dataclasses import replace

    return replace(ctx, scorer=scorer)
