"""Command-line entry points."""

from __future__ import annotations

import json
import logging
import sys
from collections import Counter
from pathlib import Path

import click

from .backends import build_backends
from .core import identity_key, load_config, load_qa_records, load_questions, read_jsonl
from .datagen import DEFAULT_QUOTAS, RelevanceLabel, build_sft_dataset
from .evaluation import judge_run, recall_csv, recall_table
from .mocks import MockDenseSearch, MockSparseSearch, load_corpus
from .pipeline import run_batch


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Enable debug logging.")
def main(verbose: bool) -> None:
    """Hybrid retrieval, two-pass reranking, data curation, and evaluation."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


@main.command()
@click.option("--questions", "questions_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def run(questions_path: str, config_path: str | None, out_path: str) -> None:
    """Answer a batch of questions; writes one result JSON per line."""
    cfg = load_config(config_path)
    backends = build_backends(cfg)
    questions = load_questions(questions_path)
    stats = run_batch(questions, cfg, backends, out_path)
    click.echo(json.dumps(stats, sort_keys=True))


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--port", default=8080, show_default=True, type=int)
@click.option("--host", default="127.0.0.1", show_default=True)
def serve(config_path: str | None, port: int, host: str) -> None:
    """Run the HTTP answer service."""
    from .server import serve as serve_forever

    cfg = load_config(config_path)
    serve_forever(cfg, build_backends(cfg), host=host, port=port)


def _parse_quotas(raw: str) -> dict[RelevanceLabel, int]:
    parts = [part.strip() for part in raw.split(",")]
    if len(parts) != 3:
        raise click.BadParameter("expected three comma-separated counts: fs,pr,ir")
    try:
        fs, pr, ir = (int(part) for part in parts)
    except ValueError:
        raise click.BadParameter(f"quotas must be integers, got {raw!r}") from None
    return {
        RelevanceLabel.FULLY_SUPPORTING: fs,
        RelevanceLabel.PARTIALLY_RELEVANT: pr,
        RelevanceLabel.IRRELEVANT: ir,
    }


@main.command()
@click.option("--records", "records_path", required=True, type=click.Path(exists=True))
@click.option(
    "--quotas",
    default=",".join(str(DEFAULT_QUOTAS[label]) for label in RelevanceLabel),
    show_default=True,
    help="Accepted-example quotas as fs,pr,ir counts.",
)
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--summary", "summary_path", type=click.Path(), help="Write the run summary JSON here.")
def datagen(records_path: str, quotas: str, config_path: str | None, out_path: str, summary_path: str | None) -> None:
    """Curate a training dataset from QA records via rejection sampling."""
    cfg = load_config(config_path)
    backends = build_backends(cfg)
    records = load_qa_records(records_path)
    summary = build_sft_dataset(records, _parse_quotas(quotas), cfg, backends, out_path)
    rendered = json.dumps(summary, sort_keys=True, indent=2)
    if summary_path:
        Path(summary_path).write_text(rendered + "\n", encoding="utf-8")
    click.echo(rendered)


@main.group(name="eval")
def eval_group() -> None:
    """Recall and judged-answer evaluation."""


@eval_group.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--ks", default="3,5,10,20", show_default=True, help="Comma-separated cutoffs.")
@click.option("--csv", "csv_path", type=click.Path(), help="Also write the recall table as CSV.")
@click.option("--out", "out_path", type=click.Path(), help="Write the report JSON here instead of stdout.")
def recall(in_path: str, ks: str, csv_path: str | None, out_path: str | None) -> None:
    """Recall at k over JSONL lines {"gold_doc_ids": [...], "ranked_doc_ids": [...]}."""
    cutoffs = [int(part) for part in ks.split(",")]
    dataset = [(row["ranked_doc_ids"], row["gold_doc_ids"]) for row in read_jsonl(in_path)]
    report = recall_table(dataset, cutoffs)
    payload = {
        "recall": {str(k): round(value, 6) for k, value in sorted(report.recall.items())},
        "questions": report.questions,
    }
    if csv_path:
        Path(csv_path).write_text(recall_csv(report), encoding="utf-8")
    rendered = json.dumps(payload, sort_keys=True, indent=2)
    if out_path:
        Path(out_path).write_text(rendered + "\n", encoding="utf-8")
    else:
        click.echo(rendered)


@eval_group.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--out", "out_path", type=click.Path(), help="Write the report JSON here instead of stdout.")
def judge(in_path: str, config_path: str | None, out_path: str | None) -> None:
    """Judge model outputs over JSONL lines {"question", "answer", "gold_context", "output"}."""
    from .core import QARecord, Question, QuestionKind

    cfg = load_config(config_path)
    backends = build_backends(cfg)
    dataset = []
    for index, row in enumerate(read_jsonl(in_path)):
        question = Question(
            row.get("question_id") or f"q{index:04d}", row["question"], QuestionKind.SINGLE_DOC
        )
        record = QARecord(question, row["answer"], tuple(row.get("gold_doc_ids") or ["unspecified"]))
        dataset.append((record, row["output"], row["gold_context"]))
    report = judge_run(dataset, backends.llm)
    payload = {
        "relevance_mean": round(report.relevance_mean, 6),
        "faithfulness_mean": round(report.faithfulness_mean, 6),
        "judged": report.judged,
        "excluded": report.excluded,
    }
    rendered = json.dumps(payload, sort_keys=True, indent=2)
    if out_path:
        Path(out_path).write_text(rendered + "\n", encoding="utf-8")
    else:
        click.echo(rendered)


@main.command(name="mock-corpus")
@click.option("--docs", "docs_path", required=True, type=click.Path(exists=True))
@click.option("--query", help="Optionally run one probe query against both mock indexes.")
@click.option("--k", default=5, show_default=True, type=int)
def mock_corpus(docs_path: str, query: str | None, k: int) -> None:
    """Load a JSONL corpus into the mock backends and report its shape."""
    corpus = load_corpus(docs_path)
    doc_counts = Counter(identity_key(chunk) for chunk in corpus)
    stats = {
        "chunks": len(corpus),
        "documents": len(doc_counts),
        "multi_chunk_documents": sum(1 for count in doc_counts.values() if count > 1),
    }
    if query:
        sparse = MockSparseSearch(corpus)
        dense = MockDenseSearch(corpus)
        stats["sparse_top"] = [chunk.chunk_id for chunk in sparse.search(query, k)]
        stats["dense_top"] = [chunk.chunk_id for chunk in dense.search(query, k)]
    click.echo(json.dumps(stats, sort_keys=True, indent=2))


if __name__ == "__main__":
    main()
