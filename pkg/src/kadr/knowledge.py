"""Knowledge-element declaration and summarization.

Covers prompt construction, strict parsing of the model's sectioned output,
and the containment rule: a document can only provide elements drawn from the
question's required set, which the index representation makes structural.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

from . import prompts
from .backends import CompletionRequest, LlmClient
from .core import DocumentChunk, Question, identity_key

log = logging.getLogger(__name__)

MAX_ELEMENTS = 4


class DeclarationParseError(ValueError):
    """Completion text violates the declaration output contract."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class SummaryParseError(ValueError):
    """Completion text violates the summarization output contract."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class KnowledgeStageError(RuntimeError):
    """Declaration or summarization could not produce a usable result."""


@dataclass(frozen=True)
class KnowledgeDeclaration:
    """Per-document analysis: the elements the question requires and which of
    them the document provides.

    Provided elements are stored as 1-based indices into
    ``question_elements``, so containment holds by construction.
    """

    question_elements: tuple[str, ...]
    doc_element_indices: frozenset[int] = frozenset()
    thoughts: str = ""
    source_key: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "question_elements", tuple(self.question_elements))
        object.__setattr__(self, "doc_element_indices", frozenset(self.doc_element_indices))
        count = len(self.question_elements)
        if not 1 <= count <= MAX_ELEMENTS:
            raise ValueError(f"need 1..{MAX_ELEMENTS} question elements, got {count}")
        if len(set(self.question_elements)) != count:
            raise ValueError("question elements must be pairwise distinct")
        for index in self.doc_element_indices:
            if not 1 <= index <= count:
                raise ValueError(f"doc element index {index} out of range 1..{count}")

    @property
    def doc_elements(self) -> tuple[str, ...]:
        """The provided elements rendered as strings, in element order."""
        return tuple(
            element
            for position, element in enumerate(self.question_elements, 1)
            if position in self.doc_element_indices
        )


@dataclass(frozen=True)
class KnowledgeSummaries:
    """The two complementary summarized elements used as rerank queries."""

    sum_0: str
    sum_1: str

    def __post_init__(self) -> None:
        if not self.sum_0 or not self.sum_1:
            raise ValueError("both summaries must be nonempty")
        if self.sum_0 == self.sum_1:
            raise ValueError("summaries must be distinct")


def build_declaration_prompt(question: Question, doc: DocumentChunk) -> CompletionRequest:
    """Declaration request: instruction plus worked demonstration as system
    text, the question and document verbatim as user text."""
    user = f"Question: {question.text}\nDocument: {doc.text}"
    return CompletionRequest(system=prompts.DECLARE_SYSTEM, user=user)


_SECTION_HEADERS = (
    ("thoughts", re.compile(r"(?i)^\s*thoughts\s+know(?:lege|ledge)\s+requirements:(.*)$")),
    ("elements", re.compile(r"(?i)^\s*knowledge\s+elements:(.*)$")),
    ("analysis", re.compile(r"(?i)^\s*analysis\s+for\s+given\s+document:(.*)$")),
    ("given", re.compile(r"(?i)^\s*given\s+knowledge:(.*)$")),
)
_ITEM_RE = re.compile(r"^\s*(\d+)[.)]\s*(\S.*?)\s*$")


def _sections(text: str) -> dict[str, str]:
    found: dict[str, list[str]] = {}
    current: str | None = None
    for line in text.splitlines():
        for name, pattern in _SECTION_HEADERS:
            match = pattern.match(line)
            if match:
                current = name
                found.setdefault(name, [])
                remainder = match.group(1).strip()
                if remainder:
                    found[name].append(remainder)
                break
        else:
            if current is not None:
                found[current].append(line)
    return {name: "\n".join(lines).strip() for name, lines in found.items()}


def parse_declaration(text: str, source_key: str = "") -> KnowledgeDeclaration:
    """Extract the numbered required-element list and the provided indices.

    "None" under the provided-knowledge header maps to the empty index set.
    Raises DeclarationParseError with a stable ``code`` on any deviation:
    missing_header, element_count, duplicate_element, empty_section,
    index_range, index_duplicate.
    """
    sections = _sections(text)
    if "elements" not in sections:
        raise DeclarationParseError("missing_header", "no 'Knowledge Elements:' section found")
    if "given" not in sections:
        raise DeclarationParseError("missing_header", "no 'Given Knowledge:' section found")

    elements = [
        match.group(2)
        for line in sections["elements"].splitlines()
        if (match := _ITEM_RE.match(line))
    ]
    if not 1 <= len(elements) <= MAX_ELEMENTS:
        raise DeclarationParseError(
            "element_count", f"expected 1..{MAX_ELEMENTS} numbered elements, found {len(elements)}"
        )
    if len(set(elements)) != len(elements):
        raise DeclarationParseError("duplicate_element", "knowledge elements must be distinct")

    given = sections["given"]
    if not given:
        raise DeclarationParseError("empty_section", "'Given Knowledge:' section has no content")
    if re.fullmatch(r"(?i)none\.?", given):
        indices: frozenset[int] = frozenset()
    else:
        numbers = re.findall(r"-?\d+", given)
        if not numbers:
            raise DeclarationParseError("empty_section", f"cannot read indices from {given!r}")
        values = [int(number) for number in numbers]
        out_of_range = [value for value in values if not 1 <= value <= len(elements)]
        if out_of_range:
            raise DeclarationParseError(
                "index_range", f"indices {out_of_range} out of range 1..{len(elements)}"
            )
        if len(values) != len(set(values)):
            raise DeclarationParseError("index_duplicate", f"duplicate indices in {values}")
        indices = frozenset(values)

    return KnowledgeDeclaration(
        tuple(elements), indices, thoughts=sections.get("thoughts", ""), source_key=source_key
    )


def render_declaration(declaration: KnowledgeDeclaration, analysis: str = "") -> str:
    """Canonical text form of a declaration; parses back to an equal value."""
    lines = ["Thoughts knowledge requirements:", declaration.thoughts, "", "Knowledge Elements:"]
    lines += [f"{index}. {element}" for index, element in enumerate(declaration.question_elements, 1)]
    if analysis:
        lines += ["", "Analysis for given document:", analysis]
    if declaration.doc_element_indices:
        rendered = ", ".join(str(index) for index in sorted(declaration.doc_element_indices))
    else:
        rendered = "None"
    lines += ["", "Given Knowledge:", rendered]
    return "\n".join(lines) + "\n"


def declare(
    question: Question,
    top_docs: Sequence[DocumentChunk],
    n_know: int,
    n_retry: int,
    llm: LlmClient,
    workers: int = 1,
    warnings: list[str] | None = None,
) -> list[KnowledgeDeclaration]:
    """Run declaration over the first ``n_know`` documents, one completion per
    document, in document order.

    Each document's parse is retried up to ``n_retry`` additional times; a
    document whose retries are exhausted is dropped with a warning. Raises
    KnowledgeStageError when every document drops.
    """
    if n_know == 0:
        return []
    if len(top_docs) < n_know:
        raise ValueError(f"need at least n_know={n_know} documents, got {len(top_docs)}")
    docs = list(top_docs)[:n_know]

    def run_one(doc: DocumentChunk) -> tuple[KnowledgeDeclaration | None, str | None]:
        request = build_declaration_prompt(question, doc)
        last: Exception | None = None
        for _ in range(1 + n_retry):
            reply = llm.complete(request)
            try:
                return parse_declaration(reply, source_key=identity_key(doc)), None
            except DeclarationParseError as exc:
                last = exc
        message = f"dropping document {identity_key(doc)} after {1 + n_retry} declaration attempts: {last}"
        return None, message

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, docs))  # map preserves document order
    else:
        results = [run_one(doc) for doc in docs]

    declarations = []
    for declaration, message in results:
        if declaration is not None:
            declarations.append(declaration)
        else:
            log.warning("%s: %s", question.question_id, message)
            if warnings is not None:
                warnings.append(message or "")
    if not declarations:
        raise KnowledgeStageError("declaration failed for every document")
    return declarations


def build_summarization_prompt(question: Question, elements: Sequence[str]) -> CompletionRequest:
    """Summarization request: the aggregated elements go one per line, in
    declaration order, duplicates preserved."""
    if not elements:
        raise ValueError("elements must be nonempty")
    block = "\n".join(elements)
    user = f"Question: {question.text}\nKnowledge Elements:\n```\n{block}\n```"
    return CompletionRequest(system=prompts.SUMMARIZE_SYSTEM, user=user)


_FENCE_RE = re.compile(r"```[a-zA-Z]*[ \t]*\n(.*?)```", re.S)


def extract_fenced_blocks(text: str) -> list[str]:
    """All fenced code block bodies, in order of appearance."""
    return _FENCE_RE.findall(text)


def parse_summaries(text: str) -> KnowledgeSummaries:
    """Extract the final fenced JSON block holding exactly two distinct strings."""
    blocks = extract_fenced_blocks(text)
    if not blocks:
        raise SummaryParseError("missing_fence", "no fenced block in completion")
    try:
        payload = json.loads(blocks[-1])
    except json.JSONDecodeError as exc:
        raise SummaryParseError("bad_json", f"fenced block is not valid JSON: {exc}") from exc
    if not isinstance(payload, list):
        raise SummaryParseError("bad_json", "fenced block does not hold a JSON list")
    if len(payload) != 2:
        raise SummaryParseError("arity", f"expected exactly 2 summaries, got {len(payload)}")
    if not all(isinstance(item, str) and item for item in payload):
        raise SummaryParseError("non_string", "summaries must be nonempty strings")
    if payload[0] == payload[1]:
        raise SummaryParseError("duplicate", "summaries must be distinct")
    return KnowledgeSummaries(payload[0], payload[1])


def summarize(
    question: Question,
    declarations: Sequence[KnowledgeDeclaration],
    n_retry: int,
    llm: LlmClient,
) -> KnowledgeSummaries:
    """Aggregate the required elements across all declarations and ask for two
    complementary summaries; the parse is retried up to ``n_retry`` extra
    times before raising KnowledgeStageError."""
    if not declarations:
        raise ValueError("declarations must be nonempty")
    elements = [element for declaration in declarations for element in declaration.question_elements]
    request = build_summarization_prompt(question, elements)
    last: Exception | None = None
    for _ in range(1 + n_retry):
        reply = llm.complete(request)
        try:
            return parse_summaries(reply)
        except SummaryParseError as exc:
            last = exc
    raise KnowledgeStageError(f"summarization failed after {1 + n_retry} attempts: {last}")
