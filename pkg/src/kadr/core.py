"""Shared domain types, the deduplication identity rule, and run configuration."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

import yaml

ENV_PREFIX = "KADR_"

# Stage names in execution order; also the keys of the per-stage worker map.
STAGES = ("retrieve", "initial_rank", "declare", "summarize", "diverse_rank", "answer")


class ConfigError(ValueError):
    """A configuration value or combination of values is invalid."""


class Origin(str, Enum):
    """Which retrieval route produced a chunk (stamped by the clients)."""

    SPARSE = "sparse"
    DENSE = "dense"
    BOTH = "both"
    SYNTHETIC = "synthetic"


class QuestionKind(str, Enum):
    SINGLE_DOC = "single_doc"
    MULTI_DOC = "multi_doc"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class DocumentChunk:
    """A pre-segmented passage of a source document.

    ``doc_id`` names the parent document; it may be empty for units with no
    single parent (synthetic concatenations), in which case the chunk id
    serves as the identity.
    """

    chunk_id: str
    doc_id: str
    text: str
    origin: Origin = Origin.SPARSE

    def __post_init__(self) -> None:
        if not self.chunk_id:
            raise ValueError("chunk_id must be nonempty")
        if not self.text:
            raise ValueError("text must be nonempty")


def identity_key(chunk: DocumentChunk) -> str:
    """Deduplication key for a chunk: the parent doc id, else the chunk id."""
    return chunk.doc_id or chunk.chunk_id


@dataclass(frozen=True)
class Question:
    question_id: str
    text: str
    kind: QuestionKind = QuestionKind.UNKNOWN

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("question text must be nonempty")


@dataclass(frozen=True)
class RankedList:
    """An ordered candidate list with at most one entry per identity key.

    ``scores`` carries backend relevance when available and must be
    non-increasing.
    """

    entries: tuple[DocumentChunk, ...] = ()
    scores: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        if self.scores is not None:
            object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
            if len(self.scores) != len(self.entries):
                raise ValueError("scores and entries must have equal length")
            for earlier, later in zip(self.scores, self.scores[1:]):
                if later > earlier:
                    raise ValueError("scores must be non-increasing")
        seen: set[str] = set()
        for entry in self.entries:
            key = identity_key(entry)
            if key in seen:
                raise ValueError(f"duplicate identity key in ranked list: {key!r}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[DocumentChunk]:
        return iter(self.entries)

    def __getitem__(self, index: int) -> DocumentChunk:
        return self.entries[index]

    def keys(self) -> tuple[str, ...]:
        return tuple(identity_key(entry) for entry in self.entries)

    def truncated(self, n: int) -> "RankedList":
        if n >= len(self.entries):
            return self
        scores = self.scores[:n] if self.scores is not None else None
        return RankedList(self.entries[:n], scores)


@dataclass(frozen=True)
class QARecord:
    """A generated question with its reference answer and gold document(s).

    Category metadata is carried through untouched.
    """

    question: Question
    answer: str
    gold_doc_ids: tuple[str, ...]
    categories: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "gold_doc_ids", tuple(self.gold_doc_ids))
        if not self.answer:
            raise ValueError("answer must be nonempty")
        if len(self.gold_doc_ids) not in (1, 2):
            raise ValueError("gold_doc_ids must hold 1 or 2 ids")
        is_multi = self.question.kind is QuestionKind.MULTI_DOC
        if (len(self.gold_doc_ids) == 2) != is_multi:
            raise ValueError("two gold documents require kind=multi_doc and vice versa")


@dataclass(frozen=True)
class BackendEndpoint:
    """Connection descriptor for one external service."""

    base_url: str = ""
    timeout: float = 30.0
    max_retries: int = 2
    auth_token: str | None = None

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ConfigError("endpoint timeout must be > 0")
        if self.max_retries < 0:
            raise ConfigError("endpoint max_retries must be >= 0")


_ENDPOINT_FIELDS = ("sparse", "dense", "reranker", "llm")
_INT_FIELDS = ("n_ret", "n_rank", "n_know", "n_ans", "n_rs", "parse_retries", "seed", "queue_capacity")
_POSITIVE_FIELDS = ("n_ret", "n_rank", "n_ans", "n_rs", "queue_capacity")
_NON_NEGATIVE_FIELDS = ("n_know", "parse_retries")


@dataclass(frozen=True)
class PipelineConfig:
    """Depths, retry bounds, endpoints, and executor settings for a run.

    Defaults are the selected operating point: retrieve 2000, rerank the top
    400, declare over the top 5, answer from the top 10, sample up to 16
    generations per curated example.
    """

    n_ret: int = 2000
    n_rank: int = 400
    n_know: int = 5
    n_ans: int = 10
    n_rs: int = 16
    parse_retries: int = 2
    seed: int = 0
    merge_first: str = "sparse"
    queue_capacity: int = 16
    workers: dict[str, int] = field(default_factory=dict)
    sparse: BackendEndpoint = field(default_factory=BackendEndpoint)
    dense: BackendEndpoint = field(default_factory=BackendEndpoint)
    reranker: BackendEndpoint = field(default_factory=BackendEndpoint)
    llm: BackendEndpoint = field(default_factory=BackendEndpoint)

    def workers_for(self, stage: str) -> int:
        return self.workers.get(stage, 1)


def validate_config(cfg: PipelineConfig) -> PipelineConfig:
    """Check every field constraint and ordering; returns the config unchanged.

    Idempotent: a config that validated once re-validates cleanly.
    """
    for name in _POSITIVE_FIELDS:
        value = getattr(cfg, name)
        if value < 1:
            raise ConfigError(f"{name} must be >= 1, got {value}")
    for name in _NON_NEGATIVE_FIELDS:
        value = getattr(cfg, name)
        if value < 0:
            raise ConfigError(f"{name} must be >= 0, got {value}")
    if cfg.n_ans > cfg.n_rank:
        raise ConfigError(f"n_ans ({cfg.n_ans}) must be <= n_rank ({cfg.n_rank})")
    if cfg.n_rank > cfg.n_ret:
        raise ConfigError(f"n_rank ({cfg.n_rank}) must be <= n_ret ({cfg.n_ret})")
    if cfg.n_know > cfg.n_rank:
        raise ConfigError(f"n_know ({cfg.n_know}) must be <= n_rank ({cfg.n_rank})")
    if cfg.merge_first not in ("sparse", "dense"):
        raise ConfigError(f"merge_first must be 'sparse' or 'dense', got {cfg.merge_first!r}")
    for stage, count in cfg.workers.items():
        if stage not in STAGES:
            raise ConfigError(f"unknown stage in workers: {stage!r}")
        if count < 1:
            raise ConfigError(f"workers[{stage!r}] must be >= 1, got {count}")
    return cfg


def config_from_dict(data: Mapping[str, Any]) -> PipelineConfig:
    """Build a config from a plain mapping, leaving defaults for absent keys."""
    known = {f.name for f in dataclasses.fields(PipelineConfig)}
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key: {key!r}")
        if key in _ENDPOINT_FIELDS and isinstance(value, Mapping):
            value = BackendEndpoint(**value)
        if key == "workers":
            if isinstance(value, int):
                value = {stage: value for stage in STAGES}
            value = {str(stage): int(count) for stage, count in value.items()}
        if key in _INT_FIELDS:
            try:
                value = int(value)
            except (TypeError, ValueError):
                raise ConfigError(f"{key} must be an integer, got {value!r}") from None
        kwargs[key] = value
    return PipelineConfig(**kwargs)


def _apply_env(data: dict[str, Any], env: Mapping[str, str]) -> None:
    for name in _INT_FIELDS + ("workers",):
        raw = env.get(ENV_PREFIX + name.upper())
        if raw is None:
            continue
        try:
            data[name] = int(raw)
        except ValueError:
            raise ConfigError(f"{ENV_PREFIX}{name.upper()} must be an integer, got {raw!r}") from None
    raw = env.get(ENV_PREFIX + "MERGE_FIRST")
    if raw is not None:
        data["merge_first"] = raw


def _resolve_mock_paths(cfg: PipelineConfig, base_dir: Path) -> PipelineConfig:
    # mock:// URLs may carry file paths relative to the config file location
    replacements: dict[str, BackendEndpoint] = {}
    for name in _ENDPOINT_FIELDS:
        endpoint: BackendEndpoint = getattr(cfg, name)
        for prefix in ("mock://corpus/", "mock://script/"):
            if endpoint.base_url.startswith(prefix):
                raw_path = endpoint.base_url[len(prefix):]
                resolved = Path(raw_path)
                if not resolved.is_absolute():
                    resolved = base_dir / resolved
                replacements[name] = dataclasses.replace(endpoint, base_url=prefix + str(resolved))
    return dataclasses.replace(cfg, **replacements) if replacements else cfg


def load_config(path: str | Path | None = None, env: Mapping[str, str] | None = None) -> PipelineConfig:
    """Load configuration from a YAML/JSON file, apply KADR_* environment
    overrides, validate, and return it.
    """
    data: dict[str, Any] = {}
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        base_dir = path.parent
        loaded = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(loaded, dict):
            raise ConfigError("config file must contain a mapping")
        data.update(loaded)
    _apply_env(data, os.environ if env is None else env)
    cfg = validate_config(config_from_dict(data))
    return _resolve_mock_paths(cfg, base_dir)


def config_digest(cfg: PipelineConfig) -> str:
    """Short stable digest of the full configuration, for health reporting."""
    payload = json.dumps(dataclasses.asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def read_jsonl(path: str | Path) -> Iterator[dict[str, Any]]:
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_jsonl(path: str | Path, rows: Iterable[Mapping[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, sort_keys=True, ensure_ascii=False, separators=(",", ":")))
            handle.write("\n")


def load_questions(path: str | Path) -> list[Question]:
    """Read questions from JSONL lines {"question_id", "question", ["kind"]}."""
    questions = []
    for index, row in enumerate(read_jsonl(path)):
        text = row.get("question") or row.get("text") or ""
        kind = QuestionKind(row["kind"]) if "kind" in row else QuestionKind.UNKNOWN
        questions.append(Question(row.get("question_id") or f"q{index:04d}", text, kind))
    return questions


def load_qa_records(path: str | Path) -> list[QARecord]:
    """Read QA records from JSONL; ``kind`` is inferred from the gold count
    when absent.
    """
    records = []
    for index, row in enumerate(read_jsonl(path)):
        golds = tuple(row["gold_doc_ids"])
        if "kind" in row:
            kind = QuestionKind(row["kind"])
        else:
            kind = QuestionKind.MULTI_DOC if len(golds) == 2 else QuestionKind.SINGLE_DOC
        question = Question(row.get("question_id") or f"q{index:04d}", row["question"], kind)
        records.append(QARecord(question, row["answer"], golds, row.get("categories", {})))
    return records
