"""Relevance scoring passes: the plain-question pass and the two-aspect pass
whose orderings are interleaved into one diversified list."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

from .backends import RerankClient
from .core import DocumentChunk, Question, RankedList, identity_key
from .fusion import interleave_merge
from .knowledge import KnowledgeSummaries

QUERY_SEPARATOR = " ; "


@dataclass(frozen=True)
class ScoredList:
    """Chunks paired with scores in [0, 1], non-increasing, unique identities."""

    entries: tuple[tuple[DocumentChunk, float], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple((chunk, float(score)) for chunk, score in self.entries))
        seen: set[str] = set()
        previous = None
        for chunk, score in self.entries:
            if not 0.0 <= score <= 1.0:
                raise ValueError(f"score {score} outside [0, 1]")
            if previous is not None and score > previous:
                raise ValueError("scores must be non-increasing")
            previous = score
            key = identity_key(chunk)
            if key in seen:
                raise ValueError(f"duplicate identity key in scored list: {key!r}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[tuple[DocumentChunk, float]]:
        return iter(self.entries)

    def chunks(self) -> tuple[DocumentChunk, ...]:
        return tuple(chunk for chunk, _ in self.entries)

    def top(self, n: int) -> "ScoredList":
        return ScoredList(self.entries[:n]) if n < len(self.entries) else self


def _stable_order(scores: Sequence[float]) -> list[int]:
    # sorted() is stable: equal scores keep their prior (retrieval) order
    return sorted(range(len(scores)), key=lambda index: -scores[index])


def initial_rerank(question: Question, docs: RankedList, reranker: RerankClient) -> ScoredList:
    """Score every candidate against the raw question text and sort descending,
    breaking ties by the original retrieval order."""
    if not len(docs):
        raise ValueError("docs must be nonempty")
    scores = reranker.score_batch(question.text, list(docs))
    order = _stable_order(scores)
    return ScoredList(tuple((docs[index], scores[index]) for index in order))


def diverse_query(question: Question, summary: str, separator: str = QUERY_SEPARATOR) -> str:
    """The question concatenated with one summarized knowledge element."""
    if not summary:
        raise ValueError("summary must be nonempty")
    return question.text + separator + summary


def diverse_rerank(
    question: Question,
    summaries: KnowledgeSummaries,
    docs: Sequence[DocumentChunk],
    reranker: RerankClient,
    n_rank: int,
) -> RankedList:
    """Score the same candidates under both question+summary queries and
    interleave the two orderings into at most ``n_rank`` unique entries."""
    docs = list(docs)
    if not docs:
        raise ValueError("docs must be nonempty")
    ranked: list[RankedList] = []
    for summary in (summaries.sum_0, summaries.sum_1):
        scores = reranker.score_batch(diverse_query(question, summary), docs)
        order = _stable_order(scores)
        ranked.append(RankedList(tuple(docs[index] for index in order)))
    return interleave_merge(ranked[0], ranked[1], n_rank)


def select_context(ranked: RankedList, n_ans: int) -> list[DocumentChunk]:
    """The first min(n_ans, len) entries, order preserved."""
    if n_ans < 0:
        raise ValueError("n_ans must be >= 0")
    return list(ranked.entries[:n_ans])
