"""Deterministic in-process stand-ins for the four external services.

All of them are pure functions of (corpus, seed, input): repeated calls agree
exactly and concurrent use is safe. They exist so retrieval fusion, parsing,
reranking, and the batch executor can be exercised end to end without live
indexes or model weights.
"""

from __future__ import annotations

import hashlib
import json
import threading
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .backends import BackendError, CompletionRequest, check_search_args
from .core import ConfigError, DocumentChunk, Origin, RankedList, identity_key, read_jsonl
from .knowledge import KnowledgeDeclaration, render_declaration


def tokens(text: str) -> list[str]:
    """Case-folded whitespace tokens."""
    return text.casefold().split()


def load_corpus(path: str | Path) -> list[DocumentChunk]:
    """Read chunks from JSONL lines {"chunk_id", "doc_id", "text"}."""
    corpus = []
    seen: set[str] = set()
    for row in read_jsonl(path):
        chunk = DocumentChunk(row["chunk_id"], row.get("doc_id", ""), row["text"])
        if chunk.chunk_id in seen:
            raise ValueError(f"duplicate chunk_id in corpus: {chunk.chunk_id!r}")
        seen.add(chunk.chunk_id)
        corpus.append(chunk)
    return corpus


def _dedupe_indices(order: Iterable[int], corpus: Sequence[DocumentChunk], k: int) -> list[int]:
    kept: list[int] = []
    seen: set[str] = set()
    for index in order:
        key = identity_key(corpus[index])
        if key in seen:
            continue
        seen.add(key)
        kept.append(index)
        if len(kept) == k:
            break
    return kept


class MockSparseSearch:
    """Lexical scorer: case-folded token overlap count normalized by the
    number of distinct document tokens. Zero-overlap documents are omitted."""

    def __init__(self, corpus: Sequence[DocumentChunk], origin: Origin = Origin.SPARSE):
        self._corpus = list(corpus)
        self._token_sets = [frozenset(tokens(chunk.text)) for chunk in self._corpus]
        self._origin = origin

    def search(self, query: str, k: int) -> RankedList:
        check_search_args(query, k)
        query_tokens = frozenset(tokens(query))
        scored: list[tuple[float, int]] = []
        for index, doc_tokens in enumerate(self._token_sets):
            overlap = len(query_tokens & doc_tokens)
            if overlap:
                scored.append((overlap / len(doc_tokens), index))
        scored.sort(key=lambda pair: (-pair[0], pair[1]))
        score_by_index = {index: score for score, index in scored}
        kept = _dedupe_indices((index for _, index in scored), self._corpus, k)
        entries = tuple(
            DocumentChunk(c.chunk_id, c.doc_id, c.text, origin=self._origin)
            for c in (self._corpus[i] for i in kept)
        )
        return RankedList(entries, tuple(score_by_index[i] for i in kept))


class MockDenseSearch:
    """Embedding scorer: cosine similarity over 64-dimension seeded
    feature-hash bag-of-words vectors. Returns every chunk when asked."""

    DIM = 64

    def __init__(self, corpus: Sequence[DocumentChunk], seed: int = 0, origin: Origin = Origin.DENSE):
        self._corpus = list(corpus)
        self._origin = origin
        self._seed_key = hashlib.blake2b(str(seed).encode("utf-8"), digest_size=16).digest()
        if self._corpus:
            self._matrix = np.stack([self._embed(chunk.text) for chunk in self._corpus])
        else:
            self._matrix = np.zeros((0, self.DIM))

    def _embed(self, text: str) -> np.ndarray:
        vector = np.zeros(self.DIM)
        for token in tokens(text):
            digest = hashlib.blake2b(token.encode("utf-8"), key=self._seed_key, digest_size=8).digest()
            value = int.from_bytes(digest, "big")
            sign = 1.0 if (value >> 7) & 1 else -1.0
            vector[value % self.DIM] += sign
        norm = np.linalg.norm(vector)
        return vector / norm if norm else vector

    def search(self, query: str, k: int) -> RankedList:
        check_search_args(query, k)
        if not self._corpus:
            return RankedList()
        similarities = self._matrix @ self._embed(query)
        order = sorted(range(len(self._corpus)), key=lambda i: (-similarities[i], i))
        kept = _dedupe_indices(order, self._corpus, k)
        entries = tuple(
            DocumentChunk(c.chunk_id, c.doc_id, c.text, origin=self._origin)
            for c in (self._corpus[i] for i in kept)
        )
        return RankedList(entries, tuple(float(similarities[i]) for i in kept))


class MockReranker:
    """Jaccard overlap of case-folded token sets: 1.0 on self-match, 0.0 on
    disjoint vocabularies."""

    def score(self, query: str, doc: DocumentChunk) -> float:
        if not query:
            raise ValueError("query must be nonempty")
        if not doc.text:
            raise ValueError("doc text must be nonempty")
        query_tokens = set(tokens(query))
        doc_tokens = set(tokens(doc.text))
        union = query_tokens | doc_tokens
        if not union:
            return 0.0
        return len(query_tokens & doc_tokens) / len(union)

    def score_batch(self, query: str, docs: Sequence[DocumentChunk]) -> list[float]:
        if not docs:
            raise ValueError("docs must be nonempty")
        return [self.score(query, doc) for doc in docs]


def script_key(system: str, user: str) -> str:
    """Digest identifying a prompt for scripted replay."""
    digest = hashlib.sha256()
    digest.update(system.encode("utf-8"))
    digest.update(b"\x00")
    digest.update(user.encode("utf-8"))
    return digest.hexdigest()


class NoScriptError(BackendError):
    """The scripted completer has no response registered for a prompt."""


class ScriptedLlm:
    """Replays registered completions keyed by a digest of (system, user).

    Registering a sequence makes repeated calls for the same prompt consume it
    in order, sticking at the final entry; registering a single string replays
    it forever. Unregistered prompts raise NoScriptError.
    """

    def __init__(self) -> None:
        self._scripts: dict[str, list[str]] = {}
        self._cursor: dict[str, int] = {}
        self._lock = threading.Lock()

    def register(self, system: str, user: str, response: str | Sequence[str]) -> None:
        responses = [response] if isinstance(response, str) else list(response)
        if not responses:
            raise ValueError("at least one response is required")
        with self._lock:
            self._scripts[script_key(system, user)] = responses
            self._cursor.pop(script_key(system, user), None)

    def complete(self, request: CompletionRequest) -> str:
        key = script_key(request.system, request.user)
        with self._lock:
            if key not in self._scripts:
                raise NoScriptError(f"no script for prompt digest {key[:12]}")
            responses = self._scripts[key]
            position = min(self._cursor.get(key, 0), len(responses) - 1)
            self._cursor[key] = position + 1
            return responses[position]

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedLlm":
        """Load scripts from a JSON list of {"system", "user", "responses"}."""
        scripted = cls()
        entries = json.loads(Path(path).read_text(encoding="utf-8"))
        for entry in entries:
            scripted.register(entry["system"], entry["user"], entry["responses"])
        return scripted


_STOPWORDS = frozenset(
    """a an and are about as at be been between but by can could did do does for from
    had has have how in into is it its of on or say says said than that the their them
    then there these they this to was were what when where which who with would records
    according regarding""".split()
)


class ProceduralLlm:
    """Format-valid completions derived deterministically from the prompt.

    Recognizes the four prompt roles by their instruction markers and emits a
    parseable response whose content is a pure function of the request; used
    for end-to-end runs where scripting every prompt is impractical.
    """

    def complete(self, request: CompletionRequest) -> str:
        system = request.system
        if "Given Knowledge" in system:
            return self._declaration(request.user)
        if "Selected Knowledge Elements" in system:
            return self._summaries(request.user)
        if "Faithfulness" in system:
            return self._judge(request.user)
        return self._answer(request.user)

    @staticmethod
    def _content_words(text: str) -> list[str]:
        words = []
        for token in tokens(text):
            word = token.strip(".,?!;:\"'()[]")
            if len(word) >= 4 and word not in _STOPWORDS and word not in words:
                words.append(word)
        return words

    def _declaration(self, user: str) -> str:
        question, _, document = user.partition("\nDocument: ")
        question = question.removeprefix("Question: ")
        words = self._content_words(question)[:4]
        if not words:
            words = [tokens(question)[0] if tokens(question) else "the question"]
        elements = tuple(f"Information about {word}." for word in words)
        doc_tokens = set(tokens(document))
        indices = frozenset(
            position for position, word in enumerate(words, 1) if word in doc_tokens
        )
        declaration = KnowledgeDeclaration(
            elements,
            indices,
            thoughts="Derived the required knowledge from the question and checked the document for coverage.",
        )
        return render_declaration(declaration, analysis="Compared each required element against the document text.")

    def _summaries(self, user: str) -> str:
        lines: list[str] = []
        inside = False
        for line in user.splitlines():
            if line.strip().startswith("```"):
                inside = not inside
                continue
            if inside and line.strip():
                lines.append(line.strip())
        distinct = list(dict.fromkeys(lines))
        if not distinct:
            distinct = ["the question topic"]
        if len(distinct) == 1:
            pair = [distinct[0], distinct[0] + " (complementary aspect)"]
        else:
            pair = [distinct[0], distinct[-1]]
        body = json.dumps(pair, ensure_ascii=False, indent=4)
        return (
            "Thoughts:\nChose the two highest-coverage elements from the aggregated list.\n\n"
            f"Selected Knowledge Elements:\n```json\n{body}\n```"
        )

    def _answer(self, user: str) -> str:
        question_line, _, context = user.partition("\nContext:")
        question = question_line.removeprefix("Question: ").strip()
        snippet = ""
        first_block = context.strip()
        if first_block.startswith("[1]"):
            first_block = first_block[len("[1]"):].split("\n\n", 1)[0]
            snippet = " ".join(first_block.split()[:12])
        if snippet:
            return f"Based on the retrieved documents: {snippet}. This addresses the question: {question}"
        return "No supporting documents were retrieved, so no grounded answer can be given."

    def _judge(self, user: str) -> str:
        digest = hashlib.sha256(user.encode("utf-8")).digest()
        relevance = digest[0] % 4 - 1
        faithfulness = digest[1] % 3 - 1
        body = json.dumps({"relevance": relevance, "faithfulness": faithfulness}, indent=4)
        return f"Weighed the output against the references.\n```json\n{body}\n```"


def search_from_url(url: str, origin: Origin, seed: int = 0):
    """Resolve a mock:// search endpoint: mock://corpus/<path-to-jsonl>."""
    if url.startswith("mock://corpus/"):
        corpus = load_corpus(url[len("mock://corpus/"):])
        if origin is Origin.DENSE:
            return MockDenseSearch(corpus, seed=seed)
        return MockSparseSearch(corpus, origin=origin)
    raise ConfigError(f"unsupported mock search endpoint: {url!r}")


def reranker_from_url(url: str) -> MockReranker:
    """Resolve a mock:// reranker endpoint: mock://overlap."""
    if url == "mock://overlap":
        return MockReranker()
    raise ConfigError(f"unsupported mock reranker endpoint: {url!r}")


def llm_from_url(url: str):
    """Resolve a mock:// LLM endpoint: mock://procedural or mock://script/<path>."""
    if url == "mock://procedural":
        return ProceduralLlm()
    if url.startswith("mock://script/"):
        return ScriptedLlm.from_file(url[len("mock://script/"):])
    raise ConfigError(f"unsupported mock llm endpoint: {url!r}")
