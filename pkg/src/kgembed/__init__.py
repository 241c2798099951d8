"""Knowledge-graph grounded training pairs and retrieval evaluation for Greek/English embedders."""

from __future__ import annotations

import logging

__version__ = "0.1.0"

logging.getLogger(__name__).addHandler(logging.NullHandler())

from .corpus import ChunkingConfig, ChunkRecord, DocumentRecord, chunk_document, ingest_corpus
from .embed import MockEmbedder, RemoteEmbedder, VectorIndex, build_index, mnrl_loss, top_k
from .evaluation import MetricReport, QueryRecord, RetrievalRun, acc_at_k, ndcg_at_k, run_benchmark
from .extract import MockExtractor, RemoteExtractor, build_knowledge_graph
from .kg import KnowledgeGraph, OntologySchema, load, persist
from .pairgen import (
    MockTranslator,
    PairGenConfig,
    RemoteTranslator,
    TrainingDataset,
    TrainingPair,
    augment_cross_lingual,
    generate_pairs,
)
from .stats import ScoreMatrix, StatsConfig, far_mean_ranks, friedman_aligned_ranks, li_posthoc

__all__ = [
    "ChunkingConfig", "ChunkRecord", "DocumentRecord", "chunk_document", "ingest_corpus",
    "MockEmbedder", "RemoteEmbedder", "VectorIndex", "build_index", "mnrl_loss", "top_k",
    "MetricReport", "QueryRecord", "RetrievalRun", "acc_at_k", "ndcg_at_k", "run_benchmark",
    "MockExtractor", "RemoteExtractor", "build_knowledge_graph",
    "KnowledgeGraph", "OntologySchema", "load", "persist",
    "MockTranslator", "PairGenConfig", "RemoteTranslator", "TrainingDataset", "TrainingPair",
    "augment_cross_lingual", "generate_pairs",
    "ScoreMatrix", "StatsConfig", "far_mean_ranks", "friedman_aligned_ranks", "li_posthoc",
]
