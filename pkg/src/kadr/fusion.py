"""Hybrid retrieval and the alternating deduplicated merge it relies on."""

from __future__ import annotations

import logging
from dataclasses import replace

from .backends import BackendError, SearchClient
from .core import Origin, PipelineConfig, Question, RankedList, identity_key

log = logging.getLogger(__name__)


class RetrievalError(RuntimeError):
    """Both retrieval routes failed; there are no candidates to continue with."""


def interleave_merge(first: RankedList, second: RankedList, n: int) -> RankedList:
    """Merge two deduplicated ranked lists by alternating selection.

    Selection starts with ``first``, preserves each source's internal order,
    skips identity keys that were already emitted, and drains the remaining
    source once the other is exhausted. The output holds min(n, |union|)
    entries with no duplicate identity keys. Per-source scores are dropped;
    they are not comparable across sources.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    sources = (first.entries, second.entries)
    positions = [0, 0]
    out: list = []
    seen: set[str] = set()
    turn = 0
    while len(out) < n:
        emitted = False
        for _ in range(2):
            entries = sources[turn]
            pos = positions[turn]
            while pos < len(entries) and identity_key(entries[pos]) in seen:
                pos += 1
            positions[turn] = pos
            if pos < len(entries):
                entry = entries[pos]
                positions[turn] = pos + 1
                seen.add(identity_key(entry))
                out.append(entry)
                turn = 1 - turn
                emitted = True
                break
            turn = 1 - turn
        if not emitted:
            break
    return RankedList(tuple(out))


def _stamp_shared(ranked: RankedList, shared: set[str]) -> RankedList:
    entries = tuple(
        replace(entry, origin=Origin.BOTH) if identity_key(entry) in shared else entry
        for entry in ranked.entries
    )
    return RankedList(entries, ranked.scores)


def hybrid_retrieve(
    question: Question,
    cfg: PipelineConfig,
    sparse: SearchClient,
    dense: SearchClient,
    warnings: list[str] | None = None,
) -> RankedList:
    """Query both retrieval routes and fuse the results by alternating merge.

    Chunks surfaced by both routes are stamped origin=both. If exactly one
    route fails the surviving list is used alone (with a warning); if both
    fail, raises RetrievalError.
    """
    results: dict[str, RankedList | None] = {}
    errors: dict[str, BackendError] = {}
    for name, client in (("sparse", sparse), ("dense", dense)):
        try:
            results[name] = client.search(question.text, cfg.n_ret)
        except BackendError as exc:
            results[name] = None
            errors[name] = exc
    if results["sparse"] is None and results["dense"] is None:
        raise RetrievalError(f"sparse and dense retrieval both failed: {errors['sparse']}; {errors['dense']}")
    for name, exc in sorted(errors.items()):
        message = f"{name} retrieval failed, continuing with the other route: {exc}"
        log.warning("%s: %s", question.question_id, message)
        if warnings is not None:
            warnings.append(message)

    sparse_list = results["sparse"] or RankedList()
    dense_list = results["dense"] or RankedList()
    shared = set(sparse_list.keys()) & set(dense_list.keys())
    if shared:
        sparse_list = _stamp_shared(sparse_list, shared)
        dense_list = _stamp_shared(dense_list, shared)
    if not len(sparse_list) and not len(dense_list):
        return RankedList()
    if cfg.merge_first == "dense":
        return interleave_merge(dense_list, sparse_list, cfg.n_ret)
    return interleave_merge(sparse_list, dense_list, cfg.n_ret)
