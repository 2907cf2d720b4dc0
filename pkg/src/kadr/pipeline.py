"""Staged execution of the full answer chain.

One question flows retrieve -> initial_rank -> declare -> summarize ->
diverse_rank -> answer. ``run_query`` executes the chain inline; ``run_batch``
runs the same stage functions as concurrent worker pools connected by bounded
queues, restoring input order at the end. Single-threaded execution is the
reference behavior: any worker configuration must reproduce it bit for bit.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from . import prompts
from .backends import BackendError, Backends, CompletionRequest, RerankClient
from .core import DocumentChunk, PipelineConfig, Question, RankedList, write_jsonl
from .fusion import RetrievalError, hybrid_retrieve
from .knowledge import KnowledgeStageError, KnowledgeSummaries, declare, summarize
from .rerank import ScoredList, diverse_rerank, initial_rerank, select_context

log = logging.getLogger(__name__)


class Stage(str, Enum):
    RETRIEVED = "retrieved"
    INITIAL_RANKED = "initial_ranked"
    DECLARED = "declared"
    SUMMARIZED = "summarized"
    DIVERSE_RANKED = "diverse_ranked"
    ANSWERED = "answered"


class PipelineError(RuntimeError):
    pass


class AnswerError(PipelineError):
    """Answer generation failed after backend retries."""


class JoinError(PipelineError):
    """A shard was missing or duplicated during ordered reassembly."""


@dataclass
class StageResult:
    """One stage's completion for one question, as carried between pools."""

    question_id: str
    stage: Stage
    payload: Any
    timing: float
    warnings: list[str] = field(default_factory=list)


@dataclass
class AnswerResult:
    question_id: str
    answer: str
    context_ids: list[str]
    timings: dict[str, float] = field(default_factory=dict)
    fallbacks: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self, include_timings: bool = False) -> dict[str, Any]:
        payload: dict[str, Any] = {
            "question_id": self.question_id,
            "answer": self.answer,
            "context_ids": list(self.context_ids),
            "fallbacks": list(self.fallbacks),
            "warnings": list(self.warnings),
        }
        if include_timings:
            payload["timings"] = {name: round(value, 6) for name, value in self.timings.items()}
        return payload

    def to_json(self, include_timings: bool = False) -> str:
        """Canonical one-line JSON. Timings are excluded by default so that
        batch output files are byte-stable across runs and worker counts."""
        return json.dumps(
            self.to_dict(include_timings), sort_keys=True, ensure_ascii=False, separators=(",", ":")
        )


def build_answer_prompt(question: Question, context: Sequence[DocumentChunk]) -> CompletionRequest:
    """Answer request: context rendered as numbered plain-text blocks in rank
    order, separated by blank lines; empty context leaves the section empty."""
    blocks = "\n\n".join(f"[{index}] {chunk.text}" for index, chunk in enumerate(context, 1))
    user = f"Question: {question.text}\nContext: {blocks}"
    return CompletionRequest(system=prompts.ANSWER_SYSTEM, user=user, max_tokens=512)


def split_ordered(items: Sequence, w: int) -> list[list]:
    """Split into ``w`` contiguous shards whose sizes differ by at most one,
    larger shards first; shards beyond the item count are empty."""
    if w < 1:
        raise ValueError("w must be >= 1")
    base, extra = divmod(len(items), w)
    shards: list[list] = []
    start = 0
    for index in range(w):
        size = base + (1 if index < extra else 0)
        shards.append(list(items[start:start + size]))
        start += size
    return shards


def join_ordered(tagged_shards: Iterable[tuple[int, Sequence]], count: int) -> list:
    """Reassemble shard results by shard index, regardless of completion
    order. Raises JoinError on a missing or duplicated shard."""
    slots: list[list | None] = [None] * count
    for index, shard in tagged_shards:
        if not 0 <= index < count:
            raise JoinError(f"shard index {index} outside 0..{count - 1}")
        if slots[index] is not None:
            raise JoinError(f"duplicate shard index {index}")
        slots[index] = list(shard)
    for index, slot in enumerate(slots):
        if slot is None:
            raise JoinError(f"missing shard {index}")
    return [item for shard in slots for item in shard]  # type: ignore[union-attr]


class ShardedReranker:
    """Wraps a reranker so batch scoring fans out across worker threads and
    reassembles scores in document order."""

    def __init__(self, inner: RerankClient, workers: int):
        if workers < 1:
            raise ValueError("workers must be >= 1")
        self._inner = inner
        self._workers = workers

    def score(self, query: str, doc: DocumentChunk) -> float:
        return self._inner.score(query, doc)

    def score_batch(self, query: str, docs: Sequence[DocumentChunk]) -> list[float]:
        if self._workers == 1 or len(docs) <= 1:
            return self._inner.score_batch(query, docs)
        shards = split_ordered(list(docs), self._workers)

        def run(indexed: tuple[int, list]) -> tuple[int, list[float]]:
            index, shard = indexed
            return index, (self._inner.score_batch(query, shard) if shard else [])

        with ThreadPoolExecutor(max_workers=self._workers) as pool:
            tagged = list(pool.map(run, enumerate(shards)))
        return join_ordered(tagged, len(shards))


@dataclass
class _QueryState:
    question: Question
    index: int = 0
    retrieved: RankedList | None = None
    initial: ScoredList | None = None
    declarations: list = field(default_factory=list)
    summaries: KnowledgeSummaries | None = None
    final_ranked: RankedList | None = None
    context: list[DocumentChunk] = field(default_factory=list)
    answer: str = ""
    timings: dict[str, float] = field(default_factory=dict)
    fallbacks: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    error: str | None = None


def _stage_retrieve(state: _QueryState, cfg: PipelineConfig, backends: Backends) -> None:
    state.retrieved = hybrid_retrieve(
        state.question, cfg, backends.sparse, backends.dense, warnings=state.warnings
    )


def _stage_initial_rank(state: _QueryState, cfg: PipelineConfig, backends: Backends) -> None:
    if state.retrieved is None or not len(state.retrieved):
        state.initial = ScoredList()
        return
    reranker = ShardedReranker(backends.reranker, cfg.workers_for("initial_rank"))
    state.initial = initial_rerank(state.question, state.retrieved, reranker)


def _stage_declare(state: _QueryState, cfg: PipelineConfig, backends: Backends) -> None:
    if cfg.n_know == 0 or state.initial is None or not len(state.initial):
        return
    effective = min(cfg.n_know, len(state.initial))
    top = state.initial.chunks()[:effective]
    try:
        state.declarations = declare(
            state.question,
            top,
            effective,
            cfg.parse_retries,
            backends.llm,
            workers=cfg.workers_for("declare"),
            warnings=state.warnings,
        )
    except KnowledgeStageError as exc:
        state.fallbacks.append("declaration_failed")
        state.warnings.append(str(exc))


def _stage_summarize(state: _QueryState, cfg: PipelineConfig, backends: Backends) -> None:
    if not state.declarations:
        return
    try:
        state.summaries = summarize(state.question, state.declarations, cfg.parse_retries, backends.llm)
    except KnowledgeStageError as exc:
        state.fallbacks.append("summarization_failed")
        state.warnings.append(str(exc))


def _stage_diverse_rank(state: _QueryState, cfg: PipelineConfig, backends: Backends) -> None:
    if state.summaries is None or state.initial is None or not len(state.initial):
        return
    top = state.initial.top(cfg.n_rank)
    reranker = ShardedReranker(backends.reranker, cfg.workers_for("diverse_rank"))
    state.final_ranked = diverse_rerank(state.question, state.summaries, top.chunks(), reranker, cfg.n_rank)


def _stage_answer(state: _QueryState, cfg: PipelineConfig, backends: Backends) -> None:
    if state.final_ranked is not None:
        ranked = state.final_ranked
    elif state.initial is not None and len(state.initial):
        ranked = RankedList(state.initial.chunks())
    else:
        ranked = RankedList()
    state.context = select_context(ranked, cfg.n_ans)
    request = build_answer_prompt(state.question, state.context)
    try:
        text = backends.llm.complete(request)
    except BackendError as exc:
        raise AnswerError(f"answer generation failed: {exc}") from exc
    if not text.strip():
        raise AnswerError("answer generation returned empty text")
    state.answer = text


_STAGE_FUNCS: tuple[tuple[str, Stage, Callable[[_QueryState, PipelineConfig, Backends], None]], ...] = (
    ("retrieve", Stage.RETRIEVED, _stage_retrieve),
    ("initial_rank", Stage.INITIAL_RANKED, _stage_initial_rank),
    ("declare", Stage.DECLARED, _stage_declare),
    ("summarize", Stage.SUMMARIZED, _stage_summarize),
    ("diverse_rank", Stage.DIVERSE_RANKED, _stage_diverse_rank),
    ("answer", Stage.ANSWERED, _stage_answer),
)


def _to_result(state: _QueryState) -> AnswerResult:
    return AnswerResult(
        question_id=state.question.question_id,
        answer=state.answer,
        context_ids=[chunk.chunk_id for chunk in state.context],
        timings=state.timings,
        fallbacks=state.fallbacks,
        warnings=state.warnings,
    )


def run_query(question: Question, cfg: PipelineConfig, backends: Backends) -> AnswerResult:
    """Execute the full chain for one question.

    With n_know = 0, or when declaration/summarization fails, the two-aspect
    pass is skipped and the context comes from the plain reranking (the
    fallback is flagged on the result). Raises RetrievalError when both
    retrieval routes fail and AnswerError when generation fails.
    """
    state = _QueryState(question=question)
    for _, stage, func in _STAGE_FUNCS:
        started = time.perf_counter()
        func(state, cfg, backends)
        state.timings[stage.value] = time.perf_counter() - started
    return _to_result(state)


class _Gauge:
    """Tracks how many questions are in flight, and the high-water mark."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.current = 0
        self.peak = 0

    def inc(self) -> None:
        with self._lock:
            self.current += 1
            self.peak = max(self.peak, self.current)

    def dec(self) -> None:
        with self._lock:
            self.current -= 1


_SENTINEL = object()


def _worker_loop(
    func: Callable[[_QueryState, PipelineConfig, Backends], None],
    stage: Stage,
    in_queue: "queue.Queue",
    out_queue: "queue.Queue",
    cfg: PipelineConfig,
    backends: Backends,
) -> None:
    while True:
        item = in_queue.get()
        if item is _SENTINEL:
            break
        state: _QueryState = item.payload if isinstance(item, StageResult) else item
        started = time.perf_counter()
        if state.error is None:
            try:
                func(state, cfg, backends)
            except Exception as exc:  # per-question isolation: batch continues
                log.warning("question %s failed at %s: %s", state.question.question_id, stage.value, exc)
                state.error = f"{type(exc).__name__}: {exc}"
        elapsed = time.perf_counter() - started
        state.timings[stage.value] = elapsed
        out_queue.put(StageResult(state.question.question_id, stage, state, elapsed, list(state.warnings)))


def run_batch(
    questions: Sequence[Question],
    cfg: PipelineConfig,
    backends: Backends,
    out_path: str | Path,
) -> dict[str, Any]:
    """Answer a batch through concurrently executing stage pools connected by
    bounded queues; the output file is ordered by input position.

    Per-question failures are recorded as inline error records and the batch
    continues. At most queue_capacity * (stages + 1) + total_workers + 1
    questions are in flight at once (reported as ``max_in_flight``).
    """
    items = list(questions)
    capacity = cfg.queue_capacity
    queues: list[queue.Queue] = [queue.Queue(maxsize=capacity) for _ in range(len(_STAGE_FUNCS) + 1)]
    gauge = _Gauge()

    threads_by_stage: list[list[threading.Thread]] = []
    for index, (name, stage, func) in enumerate(_STAGE_FUNCS):
        workers = [
            threading.Thread(
                target=_worker_loop,
                args=(func, stage, queues[index], queues[index + 1], cfg, backends),
                name=f"{name}-{worker}",
                daemon=True,
            )
            for worker in range(cfg.workers_for(name))
        ]
        for thread in workers:
            thread.start()
        threads_by_stage.append(workers)

    def feed() -> None:
        for position, question in enumerate(items):
            gauge.inc()
            queues[0].put(_QueryState(question=question, index=position))

    feeder = threading.Thread(target=feed, name="feeder", daemon=True)
    feeder.start()

    collected: list[_QueryState] = []

    def collect() -> None:
        for _ in range(len(items)):
            result: StageResult = queues[-1].get()
            gauge.dec()
            collected.append(result.payload)

    collector = threading.Thread(target=collect, name="collector", daemon=True)
    collector.start()

    feeder.join()
    for index, workers in enumerate(threads_by_stage):
        for _ in workers:
            queues[index].put(_SENTINEL)
        for thread in workers:
            thread.join()
    collector.join()

    collected.sort(key=lambda state: state.index)
    lines: list[str] = []
    errors = 0
    for state in collected:
        if state.error is not None:
            errors += 1
            lines.append(
                json.dumps(
                    {"error": state.error, "question_id": state.question.question_id},
                    sort_keys=True,
                    ensure_ascii=False,
                    separators=(",", ":"),
                )
            )
        else:
            lines.append(_to_result(state).to_json())
    Path(out_path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return {
        "questions": len(items),
        "errors": errors,
        "max_in_flight": gauge.peak,
    }
