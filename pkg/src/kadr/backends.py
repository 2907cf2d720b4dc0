"""Clients for the four external model services.

Remote implementations speak the JSON wire contracts documented in the
README; deterministic in-process stand-ins live in ``kadr.mocks`` and are
selected by ``mock://`` endpoint URLs.
"""

from __future__ import annotations

import logging
import random
import time
from dataclasses import dataclass
from typing import Any, Protocol, Sequence

import requests

from .core import BackendEndpoint, ConfigError, DocumentChunk, Origin, PipelineConfig, RankedList, identity_key

log = logging.getLogger(__name__)


class BackendError(RuntimeError):
    """Transport failure or malformed response after exhausting retries."""


@dataclass(frozen=True)
class CompletionRequest:
    system: str
    user: str
    max_tokens: int = 1024
    temperature: float = 0.0
    seed: int | None = None

    def __post_init__(self) -> None:
        if not self.user:
            raise ValueError("user text must be nonempty")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


class SearchClient(Protocol):
    def search(self, query: str, k: int) -> RankedList: ...


class RerankClient(Protocol):
    def score(self, query: str, doc: DocumentChunk) -> float: ...

    def score_batch(self, query: str, docs: Sequence[DocumentChunk]) -> list[float]: ...


class LlmClient(Protocol):
    def complete(self, request: CompletionRequest) -> str: ...


@dataclass(frozen=True)
class Backends:
    """The four clients a pipeline run talks to."""

    sparse: SearchClient
    dense: SearchClient
    reranker: RerankClient
    llm: LlmClient


def check_search_args(query: str, k: int) -> None:
    if not query:
        raise ValueError("query must be nonempty")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")


def clamp_unit(score: float) -> float:
    """Clamp a relevance score into [0, 1], logging out-of-range values."""
    if 0.0 <= score <= 1.0:
        return score
    log.warning("reranker score %s outside [0, 1]; clamping", score)
    return min(1.0, max(0.0, score))


def dedupe_ranked(chunks: Sequence[DocumentChunk], scores: Sequence[float] | None, k: int) -> RankedList:
    """Keep the first (highest ranked) chunk per identity key, up to k."""
    kept: list[DocumentChunk] = []
    kept_scores: list[float] = []
    seen: set[str] = set()
    for index, chunk in enumerate(chunks):
        key = identity_key(chunk)
        if key in seen:
            continue
        seen.add(key)
        kept.append(chunk)
        if scores is not None:
            kept_scores.append(scores[index])
        if len(kept) == k:
            break
    return RankedList(tuple(kept), tuple(kept_scores) if scores is not None else None)


class _HttpClient:
    """Shared POST-with-retries transport.

    Retries 5xx and transport errors with exponential backoff; jitter comes
    from a seeded generator so failure handling replays identically.
    """

    def __init__(self, endpoint: BackendEndpoint, seed: int = 0, backoff_base: float = 0.25):
        if not endpoint.base_url:
            raise ConfigError("endpoint base_url must be set")
        self._endpoint = endpoint
        self._rng = random.Random(seed)
        self._backoff_base = backoff_base
        self._session = requests.Session()

    def _post(self, payload: dict[str, Any]) -> dict[str, Any]:
        headers = {}
        if self._endpoint.auth_token:
            headers["Authorization"] = f"Bearer {self._endpoint.auth_token}"
        last_error: BackendError | None = None
        for attempt in range(self._endpoint.max_retries + 1):
            if attempt:
                delay = self._backoff_base * (2 ** (attempt - 1)) * (0.5 + self._rng.random())
                time.sleep(delay)
            try:
                response = self._session.post(
                    self._endpoint.base_url, json=payload, timeout=self._endpoint.timeout, headers=headers
                )
            except requests.RequestException as exc:
                last_error = BackendError(f"request to {self._endpoint.base_url} failed: {exc}")
                continue
            if response.status_code >= 500:
                last_error = BackendError(f"server error {response.status_code} from {self._endpoint.base_url}")
                continue
            if response.status_code >= 400:
                raise BackendError(f"client error {response.status_code} from {self._endpoint.base_url}")
            try:
                body = response.json()
            except ValueError as exc:
                raise BackendError(f"non-JSON response from {self._endpoint.base_url}: {exc}") from exc
            if not isinstance(body, dict):
                raise BackendError(f"unexpected response shape from {self._endpoint.base_url}")
            return body
        assert last_error is not None
        raise last_error


class HttpSearchClient(_HttpClient):
    """Search service client.

    Request {"query", "k"}; response {"hits": [{"chunk_id", "doc_id",
    "text", "score"}]} ordered by relevance.
    """

    def __init__(self, endpoint: BackendEndpoint, origin: Origin, seed: int = 0, backoff_base: float = 0.25):
        super().__init__(endpoint, seed=seed, backoff_base=backoff_base)
        self._origin = origin

    def search(self, query: str, k: int) -> RankedList:
        check_search_args(query, k)
        body = self._post({"query": query, "k": k})
        hits = body.get("hits")
        if not isinstance(hits, list):
            raise BackendError("search response is missing 'hits'")
        chunks: list[DocumentChunk] = []
        scores: list[float] = []
        for hit in hits:
            try:
                chunks.append(
                    DocumentChunk(hit["chunk_id"], hit.get("doc_id", ""), hit["text"], origin=self._origin)
                )
                scores.append(float(hit.get("score", 0.0)))
            except (KeyError, TypeError, ValueError) as exc:
                raise BackendError(f"malformed search hit: {exc}") from exc
        if any(later > earlier for earlier, later in zip(scores, scores[1:])):
            log.warning("search backend returned hits out of score order; dropping scores")
            return dedupe_ranked(chunks, None, k)
        return dedupe_ranked(chunks, scores, k)


class HttpRerankClient(_HttpClient):
    """Reranker client.

    Request {"query", "documents": [text, ...]}; response {"scores": [...]}
    aligned with the request order. Out-of-range scores are clamped.
    """

    def score_batch(self, query: str, docs: Sequence[DocumentChunk]) -> list[float]:
        if not docs:
            raise ValueError("docs must be nonempty")
        if not query:
            raise ValueError("query must be nonempty")
        body = self._post({"query": query, "documents": [doc.text for doc in docs]})
        scores = body.get("scores")
        if not isinstance(scores, list) or len(scores) != len(docs):
            raise BackendError("rerank response 'scores' missing or misaligned")
        return [clamp_unit(float(score)) for score in scores]

    def score(self, query: str, doc: DocumentChunk) -> float:
        return self.score_batch(query, [doc])[0]


class HttpLlmClient(_HttpClient):
    """Completion client.

    Request {"system", "user", "max_tokens", "temperature", "seed"};
    response {"text": "..."}.
    """

    def complete(self, request: CompletionRequest) -> str:
        body = self._post(
            {
                "system": request.system,
                "user": request.user,
                "max_tokens": request.max_tokens,
                "temperature": request.temperature,
                "seed": request.seed,
            }
        )
        text = body.get("text")
        if not isinstance(text, str) or not text:
            raise BackendError("completion response is empty")
        return text


def build_backends(cfg: PipelineConfig) -> Backends:
    """Construct the four clients from the config's endpoint descriptors."""
    from . import mocks  # deferred: mocks renders knowledge templates

    def search_client(endpoint: BackendEndpoint, origin: Origin) -> SearchClient:
        if endpoint.base_url.startswith("mock://"):
            return mocks.search_from_url(endpoint.base_url, origin=origin, seed=cfg.seed)
        return HttpSearchClient(endpoint, origin=origin, seed=cfg.seed)

    if cfg.reranker.base_url.startswith("mock://"):
        reranker: RerankClient = mocks.reranker_from_url(cfg.reranker.base_url)
    else:
        reranker = HttpRerankClient(cfg.reranker, seed=cfg.seed)
    if cfg.llm.base_url.startswith("mock://"):
        llm: LlmClient = mocks.llm_from_url(cfg.llm.base_url)
    else:
        llm = HttpLlmClient(cfg.llm, seed=cfg.seed)
    return Backends(
        sparse=search_client(cfg.sparse, Origin.SPARSE),
        dense=search_client(cfg.dense, Origin.DENSE),
        reranker=reranker,
        llm=llm,
    )
