"""Denoising implicit-feedback recommenders with LLM-derived relevance signals.

Semantic relevance (cosine of projected profile embeddings) filters mined hard
negatives; logical relevance (High/Mid/Low ratings from an oracle) edits the
interaction graph, and two contrastive losses align the original and edited
graph views.
"""
from .backbone import EmbeddingTable, Representations, init_embeddings, propagate, score, score_all
from .data import InteractionDataset, NoiseSpec, ProfileStore, inject_noise, load_dataset, load_profiles, split_dataset
from .evaluation import MetricsReport, evaluate, katz_index, ndcg_at_k, noise_sweep, recall_at_k
from .graph import InteractionGraph, apply_relevance_edits, build_graph, edge_drop, normalize
from .oracle import FileProvider, HttpProvider, MockProvider, classify
from .trainer import Pipeline, TrainConfig

__all__ = [
    "EmbeddingTable", "Representations", "init_embeddings", "propagate", "score", "score_all",
    "InteractionDataset", "NoiseSpec", "ProfileStore", "inject_noise", "load_dataset", "load_profiles", "split_dataset",
    "MetricsReport", "evaluate", "katz_index", "ndcg_at_k", "noise_sweep", "recall_at_k",
    "InteractionGraph", "apply_relevance_edits", "build_graph", "edge_drop", "normalize",
    "FileProvider", "HttpProvider", "MockProvider", "classify", "Pipeline", "TrainConfig",
]
__version__ = "0.1.0"
