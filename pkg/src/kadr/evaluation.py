"""Recall measurement and the model-judged relevance/faithfulness protocol."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Sequence, Union

from . import prompts
from .backends import BackendError, CompletionRequest, LlmClient
from .core import QARecord, Question, RankedList

log = logging.getLogger(__name__)

RELEVANCE_VALUES = (-1, 0, 1, 2)
FAITHFULNESS_VALUES = (-1, 0, 1)


class JudgeParseError(ValueError):
    """Judge completion lacks a readable score block or has bad values."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class EvalError(RuntimeError):
    """An evaluation run produced no usable judgments."""


@dataclass(frozen=True)
class JudgeScores:
    relevance: int
    faithfulness: int

    def __post_init__(self) -> None:
        if self.relevance not in RELEVANCE_VALUES:
            raise ValueError(f"relevance must be one of {RELEVANCE_VALUES}")
        if self.faithfulness not in FAITHFULNESS_VALUES:
            raise ValueError(f"faithfulness must be one of {FAITHFULNESS_VALUES}")


@dataclass(frozen=True)
class RecallReport:
    """Mean recall per cutoff over a question set."""

    recall: dict[int, float]
    questions: int

    def __post_init__(self) -> None:
        previous = None
        for k in sorted(self.recall):
            value = self.recall[k]
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"recall value {value} outside [0, 1]")
            if previous is not None and value < previous - 1e-12:
                raise ValueError("recall must be non-decreasing in k")
            previous = value


def recall_at_ids(ranked_keys: Sequence[str], gold_doc_ids: Sequence[str], k: int) -> float:
    """Fraction of distinct gold doc ids present among the top-k keys."""
    golds = list(dict.fromkeys(gold_doc_ids))
    if not golds:
        raise ValueError("gold_doc_ids must be nonempty")
    if k < 1:
        raise ValueError("k must be >= 1")
    top = set(ranked_keys[:k])
    return sum(1 for gold in golds if gold in top) / len(golds)


def recall_at_k(ranked: RankedList, gold_doc_ids: Sequence[str], k: int) -> float:
    """Fraction of distinct gold documents whose identity key appears in the
    top k entries; finding one of two golds scores 0.5."""
    return recall_at_ids(ranked.keys(), gold_doc_ids, k)


def recall_table(
    dataset: Sequence[tuple[Union[RankedList, Sequence[str]], Sequence[str]]],
    ks: Sequence[int],
) -> RecallReport:
    """Mean recall at every cutoff in ``ks`` (strictly increasing)."""
    if not dataset:
        raise ValueError("dataset must be nonempty")
    if not ks or any(b <= a for a, b in zip(ks, ks[1:])):
        raise ValueError("ks must be strictly increasing and nonempty")
    totals = {k: 0.0 for k in ks}
    for ranked, golds in dataset:
        keys = ranked.keys() if isinstance(ranked, RankedList) else list(ranked)
        for k in ks:
            totals[k] += recall_at_ids(keys, golds, k)
    return RecallReport({k: totals[k] / len(dataset) for k in ks}, len(dataset))


def format_k(k: int) -> str:
    """Column label for a cutoff: R@3, R@400, R@1k, R@2k."""
    if k >= 1000 and k % 1000 == 0:
        return f"R@{k // 1000}k"
    return f"R@{k}"


def recall_csv(report: RecallReport, name: str = "run") -> str:
    """One-row CSV of the recall table, columns labeled R@k."""
    ks = sorted(report.recall)
    header = "retriever," + ",".join(format_k(k) for k in ks)
    row = name + "," + ",".join(f"{report.recall[k]:.4f}" for k in ks)
    return header + "\n" + row + "\n"


def build_judge_prompt(
    question: Question, gold_answer: str, gold_context: str, model_output: str
) -> CompletionRequest:
    """Scoring request: the grading rubric as system text, the four item
    fields substituted verbatim into the user text."""
    if not gold_answer or not gold_context or not model_output:
        raise ValueError("gold_answer, gold_context, and model_output must be nonempty")
    user = (
        f"**Question:** {question.text}\n"
        f"**Ground Truth Answer:** {gold_answer}\n"
        f"**Reference Documents:** {gold_context}\n"
        f"**Model's Output:** {model_output}"
    )
    return CompletionRequest(system=prompts.JUDGE_SYSTEM, user=user)


def parse_judge(text: str) -> JudgeScores:
    """Read the last fenced JSON object and validate both score ranges."""
    from .knowledge import extract_fenced_blocks

    blocks = extract_fenced_blocks(text)
    if not blocks:
        raise JudgeParseError("missing_block", "no fenced JSON block in completion")
    try:
        payload = json.loads(blocks[-1])
    except json.JSONDecodeError as exc:
        raise JudgeParseError("bad_json", f"fenced block is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise JudgeParseError("bad_json", "fenced block does not hold a JSON object")
    for name in ("relevance", "faithfulness"):
        if name not in payload:
            raise JudgeParseError("missing_field", f"score object lacks {name!r}")
    allowed = {"relevance": RELEVANCE_VALUES, "faithfulness": FAITHFULNESS_VALUES}
    for name, values in allowed.items():
        value = payload[name]
        if isinstance(value, bool) or not isinstance(value, int):
            raise JudgeParseError("non_integer", f"{name} must be an integer, got {value!r}")
        if value not in values:
            raise JudgeParseError("out_of_range", f"{name}={value} outside {values}")
    return JudgeScores(payload["relevance"], payload["faithfulness"])


@dataclass(frozen=True)
class JudgeReport:
    relevance_mean: float
    faithfulness_mean: float
    judged: int
    excluded: int


def judge_run(dataset: Sequence[tuple[QARecord, str, str]], llm: LlmClient) -> JudgeReport:
    """Judge every (record, model_output, gold_context) item and average the
    scores; items whose reply fails to parse are excluded and counted."""
    if not dataset:
        raise ValueError("dataset must be nonempty")
    scores: list[JudgeScores] = []
    excluded = 0
    for record, model_output, gold_context in dataset:
        request = build_judge_prompt(record.question, record.answer, gold_context, model_output)
        try:
            scores.append(parse_judge(llm.complete(request)))
        except (JudgeParseError, BackendError) as exc:
            log.warning("excluding %s from judging: %s", record.question.question_id, exc)
            excluded += 1
    if not scores:
        raise EvalError("every item failed judging")
    return JudgeReport(
        relevance_mean=sum(score.relevance for score in scores) / len(scores),
        faithfulness_mean=sum(score.faithfulness for score in scores) / len(scores),
        judged=len(scores),
        excluded=excluded,
    )
