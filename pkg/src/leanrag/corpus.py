"""Document corpus: loading, sentence segmentation, sub-document windows,
token counting, and gold-answer containment checks.

The corpus is immutable once loaded; every function here is pure and safe to
call from concurrent readers.
"""

from __future__ import annotations

import json
import logging
import re
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

logger = logging.getLogger(__name__)

Span = tuple[int, int]
Tokenizer = Callable[[str], list[str]]

_PUNCT = set(string.punctuation)
_TERMINATORS = ".!?"

# Trailing periods of these never end a sentence, even at sentence start
# ("Mr. J. Smith won." is one sentence).
_ABBREVIATIONS = frozenset({
    "mr", "mrs", "ms", "dr", "prof", "rev", "hon", "st",
    "jr", "sr", "vs", "al", "inc", "ltd", "co",
})

# A name-like continuation after an initial: a capitalized word ("Smith")
# or another initial ("K.").
_NAME_NEXT_RE = re.compile(r"[A-Z](?:[a-z]|\.)")


class CorpusFormatError(ValueError):
    """A corpus or QA file line could not be parsed."""

    def __init__(self, path: str | Path, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = str(path)
        self.line_no = line_no


class DuplicateDocumentError(ValueError):
    """Two corpus records share the same id."""


@dataclass(frozen=True)
class Document:
    """A corpus unit with pre-segmented sentences.

    ``sentences`` holds (start, end) character spans into ``text``; spans are
    ordered, non-overlapping, and jointly cover all non-whitespace text.
    """

    doc_id: str
    title: str
    text: str
    sentences: tuple[Span, ...]

    @property
    def sentence_count(self) -> int:
        return len(self.sentences)

    def sentence_texts(self) -> list[str]:
        return [self.text[a:b] for a, b in self.sentences]


@dataclass(frozen=True)
class SubDocument:
    """A contiguous run of sentences cut from a parent document."""

    parent_doc_id: str
    start_sentence: int
    sentence_count: int
    text: str
    token_count: int

    @property
    def subdoc_id(self) -> str:
        return f"{self.parent_doc_id}#{self.start_sentence}+{self.sentence_count}"


@dataclass(frozen=True)
class QARecord:
    question_id: str
    question: str
    gold_answers: frozenset[str]

    def __post_init__(self):
        if not self.gold_answers:
            raise ValueError(f"question {self.question_id!r} has no gold answers")


class Corpus:
    """An ordered, id-indexed collection of documents."""

    def __init__(self, documents: Iterable[Document]):
        self._docs: dict[str, Document] = {}
        for doc in documents:
            if doc.doc_id in self._docs:
                raise DuplicateDocumentError(f"duplicate doc_id {doc.doc_id!r}")
            self._docs[doc.doc_id] = doc

    def __len__(self) -> int:
        return len(self._docs)

    def __iter__(self) -> Iterator[Document]:
        return iter(self._docs.values())

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._docs

    def get(self, doc_id: str) -> Document:
        return self._docs[doc_id]

    def doc_ids(self) -> list[str]:
        return list(self._docs)


def split_sentences(text: str) -> list[Span]:
    """Segment ``text`` into sentence spans.

    A sentence ends at ``.``, ``!`` or ``?`` followed by whitespace or end of
    text. A period is kept inside the sentence when the preceding word is a
    known abbreviation ("Mr.") or a single capital initial followed by a
    name-like word ("J. Smith"). Text without any terminator is one span.
    """
    spans: list[Span] = []
    n = len(text)
    span_start = _next_nonspace(text, 0)
    i = span_start
    while i < n:
        ch = text[i]
        if ch in _TERMINATORS and (i + 1 >= n or text[i + 1].isspace()):
            if ch == "." and _is_guarded_period(text, i):
                i += 1
                continue
            spans.append((span_start, i + 1))
            span_start = _next_nonspace(text, i + 1)
            i = span_start
            continue
        i += 1
    if span_start < n:
        end = n
        while end > span_start and text[end - 1].isspace():
            end -= 1
        if end > span_start:
            spans.append((span_start, end))
    return spans


def _next_nonspace(text: str, pos: int) -> int:
    while pos < len(text) and text[pos].isspace():
        pos += 1
    return pos


def _is_guarded_period(text: str, dot: int) -> bool:
    j = dot
    while j > 0 and text[j - 1].isalpha():
        j -= 1
    word = text[j:dot]
    if not word:
        return False
    if word.lower() in _ABBREVIATIONS:
        return True
    if len(word) == 1 and word.isupper():
        k = _next_nonspace(text, dot + 1)
        return bool(_NAME_NEXT_RE.match(text, k))
    return False


def default_tokenizer(text: str) -> list[str]:
    """Whitespace split, then peel leading/trailing punctuation into
    separate tokens ("king?" -> ["king", "?"])."""
    tokens: list[str] = []
    for word in text.split():
        lead: list[str] = []
        while word and word[0] in _PUNCT:
            lead.append(word[0])
            word = word[1:]
        trail: list[str] = []
        while word and word[-1] in _PUNCT:
            trail.append(word[-1])
            word = word[:-1]
        tokens.extend(lead)
        if word:
            tokens.append(word)
        tokens.extend(reversed(trail))
    return tokens


def count_tokens(text: str, tokenizer: Tokenizer | None = None) -> int:
    """Deterministic token count under ``tokenizer`` (default splitter above).

    Additive over whitespace joins: count(a + " " + b) == count(a) + count(b).
    """
    return len((tokenizer or default_tokenizer)(text))


def normalize_for_match(text: str) -> str:
    """Lowercase, collapse whitespace, strip surrounding punctuation per token."""
    tokens = []
    for word in text.split():
        word = word.strip(string.punctuation).lower()
        if word:
            tokens.append(word)
    return " ".join(tokens)


def contains_answer(text: str, gold_answers: Iterable[str], exact: bool = False) -> bool:
    """True iff the normalized text contains any normalized gold answer.

    Containment is substring-based ("Parisian" contains "Paris"); pass
    ``exact=True`` to require the whole normalized text to equal an answer.
    """
    answers = list(gold_answers)
    if not answers:
        raise ValueError("gold_answers must be non-empty")
    normalized = normalize_for_match(text)
    for answer in answers:
        target = normalize_for_match(answer)
        if not target:
            continue
        if exact:
            if normalized == target:
                return True
        elif target in normalized:
            return True
    return False


def generate_subdocuments(
    doc: Document,
    window: int = 3,
    stride: int = 1,
    tokenizer: Tokenizer | None = None,
) -> list[SubDocument]:
    """Slice ``doc`` into sliding sentence windows.

    With S >= window sentences and stride 1 this yields S - window + 1
    sub-documents; shorter documents yield a single whole-document slice.
    Every sentence is covered by at least one sub-document: a tail window is
    appended when the stride skips past the end, and a stride larger than
    the window is capped to the window size.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    stride = min(stride, window)
    texts = doc.sentence_texts()
    total = len(texts)
    if total == 0:
        raise ValueError(f"document {doc.doc_id!r} has no sentences")
    if total <= window:
        starts = [0]
        size = total
    else:
        starts = list(range(0, total - window + 1, stride))
        if starts[-1] != total - window:
            starts.append(total - window)
        size = window
    out = []
    for start in starts:
        text = " ".join(texts[start:start + size])
        out.append(SubDocument(
            parent_doc_id=doc.doc_id,
            start_sentence=start,
            sentence_count=size,
            text=text,
            token_count=count_tokens(text, tokenizer),
        ))
    return out


def whole_document_subdoc(doc: Document, tokenizer: Tokenizer | None = None) -> SubDocument:
    """A single sub-document covering every sentence of ``doc``."""
    text = " ".join(doc.sentence_texts())
    return SubDocument(
        parent_doc_id=doc.doc_id,
        start_sentence=0,
        sentence_count=max(doc.sentence_count, 1),
        text=text,
        token_count=count_tokens(text, tokenizer),
    )


def make_document(doc_id: str, title: str, text: str) -> Document:
    return Document(doc_id=doc_id, title=title, text=text,
                    sentences=tuple(split_sentences(text)))


def load_corpus(path: str | Path) -> Corpus:
    """Read a JSONL corpus ({"id", "title", "text"} per line)."""
    docs: list[Document] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            record = _parse_record(path, line_no, line, ("id", "title", "text"))
            doc_id = str(record["id"])
            if doc_id in seen:
                raise DuplicateDocumentError(
                    f"{path}:{line_no}: duplicate doc id {doc_id!r}")
            seen.add(doc_id)
            docs.append(make_document(doc_id, str(record["title"]), str(record["text"])))
    return Corpus(docs)


def load_qa(path: str | Path) -> list[QARecord]:
    """Read a JSONL QA set ({"question_id", "question", "answers"} per line)."""
    records: list[QARecord] = []
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            record = _parse_record(path, line_no, line,
                                   ("question_id", "question", "answers"))
            answers = record["answers"]
            if not isinstance(answers, list) or not answers:
                raise CorpusFormatError(path, line_no, "answers must be a non-empty list")
            records.append(QARecord(
                question_id=str(record["question_id"]),
                question=str(record["question"]),
                gold_answers=frozenset(str(a) for a in answers),
            ))
    return records


def _parse_record(path: str | Path, line_no: int, line: str,
                  required: Sequence[str]) -> dict:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(path, line_no, f"invalid JSON ({exc.msg})") from exc
    if not isinstance(record, dict):
        raise CorpusFormatError(path, line_no, "expected a JSON object")
    for key in required:
        if key not in record:
            raise CorpusFormatError(path, line_no, f"missing field {key!r}")
    return record
