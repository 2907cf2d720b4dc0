"""SFT data curation: relevance labeling of retrieved chunks, rule-based
rejection sampling of declaration outputs, and quota-balanced emission."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence, Union

from .backends import Backends, LlmClient, SearchClient
from .core import DocumentChunk, Origin, PipelineConfig, QARecord, QuestionKind, Question, identity_key, write_jsonl
from .knowledge import (
    MAX_ELEMENTS,
    DeclarationParseError,
    KnowledgeDeclaration,
    build_declaration_prompt,
    parse_declaration,
)

log = logging.getLogger(__name__)

# Separator joining the two gold chunks of a multi-document question, in
# retrieval-rank order, to form the synthetic fully-supporting evidence.
FS_SEPARATOR = "\n\n"

# Labeling retrieval depths: within these, gold chunks surface essentially
# always when querying with question+answer concatenation.
LABEL_DEPTH_SINGLE = 100
LABEL_DEPTH_MULTI = 400


class RelevanceLabel(str, Enum):
    FULLY_SUPPORTING = "fully_supporting"
    PARTIALLY_RELEVANT = "partially_relevant"
    IRRELEVANT = "irrelevant"


DEFAULT_QUOTAS: dict[RelevanceLabel, int] = {
    RelevanceLabel.FULLY_SUPPORTING: 1000,
    RelevanceLabel.PARTIALLY_RELEVANT: 2500,
    RelevanceLabel.IRRELEVANT: 6500,
}


class Rule(str, Enum):
    FORMAT = "format"
    QUANTITY_UNIQUENESS = "quantity_uniqueness"
    ATTRIBUTION = "attribution"
    COVERAGE = "coverage"


class UnlabelableRecord(RuntimeError):
    """A gold document never surfaced in the labeling retrieval."""


@dataclass(frozen=True)
class LabeledChunk:
    chunk: DocumentChunk
    label: RelevanceLabel
    question_ref: str


@dataclass(frozen=True)
class SftExample:
    system: str
    user: str
    target_output: str
    label: RelevanceLabel


@dataclass(frozen=True)
class AcceptanceReport:
    accepted: bool
    failed_rule: Rule | None = None
    detail: str = ""

    def __post_init__(self) -> None:
        if self.accepted and self.failed_rule is not None:
            raise ValueError("an accepted report cannot carry a failed rule")


class RejectionExhausted(RuntimeError):
    """Every attempt was rejected; carries the final acceptance report."""

    def __init__(self, message: str, last_report: AcceptanceReport):
        super().__init__(message)
        self.last_report = last_report


def label_chunks(record: QARecord, sparse: SearchClient, k: int) -> list[LabeledChunk]:
    """Label the top-k retrieval for one QA record.

    The labeling query concatenates question and answer. Single-document: the
    first chunk from the gold document is fully supporting. Multi-document:
    the first chunk from each gold document is partially relevant and their
    concatenation (retrieval-rank order) forms a synthetic fully supporting
    chunk. Chunks from non-gold documents are irrelevant either way.

    Raises UnlabelableRecord when a gold document is absent from the top k.
    """
    query = f"{record.question.text} {record.answer}"
    hits = sparse.search(query, k)
    golds = set(record.gold_doc_ids)
    gold_chunks = [chunk for chunk in hits if identity_key(chunk) in golds]
    found = {identity_key(chunk) for chunk in gold_chunks}
    missing = [gold for gold in record.gold_doc_ids if gold not in found]
    if missing:
        raise UnlabelableRecord(
            f"gold document(s) {missing} not in top {k} for {record.question.question_id}"
        )

    qid = record.question.question_id
    labeled: list[LabeledChunk] = []
    if record.question.kind is QuestionKind.MULTI_DOC:
        combined = DocumentChunk(
            chunk_id=f"{gold_chunks[0].chunk_id}+{gold_chunks[1].chunk_id}",
            doc_id="",
            text=gold_chunks[0].text + FS_SEPARATOR + gold_chunks[1].text,
            origin=Origin.SYNTHETIC,
        )
        labeled.append(LabeledChunk(combined, RelevanceLabel.FULLY_SUPPORTING, qid))
        labeled.extend(
            LabeledChunk(chunk, RelevanceLabel.PARTIALLY_RELEVANT, qid) for chunk in gold_chunks
        )
    else:
        labeled.append(LabeledChunk(gold_chunks[0], RelevanceLabel.FULLY_SUPPORTING, qid))
    labeled.extend(
        LabeledChunk(chunk, RelevanceLabel.IRRELEVANT, qid)
        for chunk in hits
        if identity_key(chunk) not in golds
    )
    return labeled


def check_rules(
    declaration: Union[KnowledgeDeclaration, Exception],
    label: RelevanceLabel,
) -> AcceptanceReport:
    """Evaluate the acceptance rules in fixed order: format, quantity and
    uniqueness, attribution, then label-dependent coverage.

    ``declaration`` may be a parse error, which fails the format rule.
    Coverage: fully supporting requires the provided set to equal the required
    set; partially relevant requires a non-empty strict subset; irrelevant
    requires a strict subset which may be empty.
    """
    if isinstance(declaration, Exception):
        return AcceptanceReport(False, Rule.FORMAT, f"unparseable output: {declaration}")

    required = declaration.question_elements
    if not 1 <= len(required) <= MAX_ELEMENTS or len(set(required)) != len(required):
        return AcceptanceReport(False, Rule.QUANTITY_UNIQUENESS, f"bad element set: {required}")

    # Structurally guaranteed by the index representation; re-verified by
    # exact string comparison anyway.
    if any(element not in required for element in declaration.doc_elements):
        return AcceptanceReport(False, Rule.ATTRIBUTION, "provided element not among required elements")

    provided = declaration.doc_element_indices
    full = len(provided) == len(required)
    if label is RelevanceLabel.FULLY_SUPPORTING and not full:
        return AcceptanceReport(False, Rule.COVERAGE, "fully supporting requires every required element")
    if label is RelevanceLabel.PARTIALLY_RELEVANT and (not provided or full):
        return AcceptanceReport(False, Rule.COVERAGE, "partially relevant requires a non-empty strict subset")
    if label is RelevanceLabel.IRRELEVANT and full:
        return AcceptanceReport(False, Rule.COVERAGE, "irrelevant requires a strict subset")
    return AcceptanceReport(True)


def rejection_sample(
    question: Question,
    labeled: LabeledChunk,
    n_rs: int,
    llm: LlmClient,
) -> SftExample:
    """Generate-and-filter loop: complete, parse, check rules, keep the first
    accepted output. Raises RejectionExhausted after ``n_rs`` attempts,
    carrying the final report."""
    if n_rs < 1:
        raise ValueError("n_rs must be >= 1")
    request = build_declaration_prompt(question, labeled.chunk)
    report = AcceptanceReport(False, Rule.FORMAT, "no attempts made")
    for _ in range(n_rs):
        reply = llm.complete(request)
        try:
            parsed: Union[KnowledgeDeclaration, Exception] = parse_declaration(
                reply, source_key=identity_key(labeled.chunk)
            )
        except DeclarationParseError as exc:
            parsed = exc
        report = check_rules(parsed, labeled.label)
        if report.accepted:
            return SftExample(request.system, request.user, reply, labeled.label)
    raise RejectionExhausted(
        f"no accepted output within {n_rs} attempts for chunk {labeled.chunk.chunk_id}", report
    )


class _CountingLlm:
    def __init__(self, inner: LlmClient):
        self.inner = inner
        self.calls = 0

    def complete(self, request) -> str:
        self.calls += 1
        return self.inner.complete(request)


def build_sft_dataset(
    records: Iterable[QARecord],
    quotas: Mapping[RelevanceLabel, int],
    cfg: PipelineConfig,
    backends: Backends,
    out_path: str | Path,
    depth_single: int = LABEL_DEPTH_SINGLE,
    depth_multi: int = LABEL_DEPTH_MULTI,
    irrelevant_per_record: int = 8,
) -> dict[str, Any]:
    """Stream records through labeling and rejection sampling until each label
    quota is met or records run out; writes accepted examples as JSONL.

    Irrelevant candidates are taken from the top of the labeling ranking
    (hard negatives), at most ``irrelevant_per_record`` attempts per record.
    Returns a summary: accepted counts per label, per-rule rejection
    histogram, attempts histogram, unlabelable count, and quota shortfall.
    Shortfall is reported, not fatal.
    """
    quotas = {label: int(quotas.get(label, 0)) for label in RelevanceLabel}
    if any(count < 0 for count in quotas.values()):
        raise ValueError("quotas must be non-negative")
    counting = _CountingLlm(backends.llm)
    accepted: Counter = Counter()
    rejected_by_rule: Counter = Counter()
    attempts_histogram: Counter = Counter()
    unlabelable = 0
    rows: list[dict[str, Any]] = []

    for record in records:
        if all(accepted[label] >= quotas[label] for label in RelevanceLabel):
            break
        depth = depth_multi if record.question.kind is QuestionKind.MULTI_DOC else depth_single
        try:
            labeled = label_chunks(record, backends.sparse, depth)
        except UnlabelableRecord as exc:
            log.warning("%s", exc)
            unlabelable += 1
            continue
        irrelevant_tried = 0
        for item in labeled:
            if accepted[item.label] >= quotas[item.label]:
                continue
            if item.label is RelevanceLabel.IRRELEVANT:
                if irrelevant_tried >= irrelevant_per_record:
                    continue
                irrelevant_tried += 1
            calls_before = counting.calls
            try:
                example = rejection_sample(record.question, item, cfg.n_rs, counting)
            except RejectionExhausted as exc:
                rule = exc.last_report.failed_rule
                rejected_by_rule[rule.value if rule else "unknown"] += 1
                continue
            attempts_histogram[counting.calls - calls_before] += 1
            accepted[item.label] += 1
            rows.append(
                {
                    "system": example.system,
                    "user": example.user,
                    "output": example.target_output,
                    "label": example.label.value,
                }
            )

    write_jsonl(out_path, rows)
    shortfall = {
        label.value: quotas[label] - accepted[label]
        for label in RelevanceLabel
        if accepted[label] < quotas[label]
    }
    if shortfall:
        log.warning("quota shortfall: %s", shortfall)
    return {
        "accepted": {label.value: accepted[label] for label in RelevanceLabel},
        "rejected_by_rule": dict(rejected_by_rule),
        "attempts": {str(count): value for count, value in sorted(attempts_histogram.items())},
        "unlabelable": unlabelable,
        "shortfall": shortfall,
        "examples": len(rows),
    }
