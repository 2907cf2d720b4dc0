"""Hybrid-retrieval question answering with two-pass knowledge-aware reranking."""

__version__ = "0.1.0"
