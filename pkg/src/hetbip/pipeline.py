"""End-to-end steps shared by the command line and the acceptance tests."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .baselines import GcnConfig, feature_space, gcn_embed, gcn_features
from .encoders import encode_graph
from .evaluation import MetricReport, ModelSpec, cross_validate
from .graph import BipartiteGraph, graph_from_dataset, load_dataset_dir
from .model import EmbeddingTable, TrainConfig, TrainResult, embedding_table, train
from .sampling import NeighborSets, WalkConfig, build_neighbor_sets, generate_walks


@dataclass
class Prepared:
    graph: BipartiteGraph
    walks: list
    neighbor_sets: NeighborSets
    walk_config: WalkConfig


def load_graph(data_dir, text_dim=384, image_dim=2048, with_labels=True) -> BipartiteGraph:
    return graph_from_dataset(load_dataset_dir(data_dir, text_dim, image_dim), with_labels)


def prepare(graph: BipartiteGraph, walk_config: WalkConfig, threads: int = 1) -> Prepared:
    walks = generate_walks(graph, walk_config, threads)
    return Prepared(graph, walks, build_neighbor_sets(graph, walk_config, walks), walk_config)


def train_embeddings(prep: Prepared, config: TrainConfig, text_dim=384, hash_seed=0, progress=None) -> TrainResult:
    attrs, _ = encode_graph(prep.graph, text_dim, hash_seed)
    return train(prep.graph, prep.neighbor_sets, attrs, config, prep.walks, prep.walk_config.window, progress)


def gcn_table(prep: Prepared, cfg: GcnConfig, text_dim=384, image_dim=2048, hash_seed=0) -> EmbeddingTable:
    space = feature_space(prep.graph, text_dim, image_dim, hash_seed)
    Z = gcn_embed(prep.graph, gcn_features(prep.graph, space, cfg.dim), prep.walks, cfg)
    return embedding_table(prep.graph, Z)


def user_labels(labels: dict[str, float]) -> tuple[list[str], np.ndarray]:
    """Sorted user ids and binary labels (1 = Right, score >= 0)."""
    ids = sorted(labels)
    return ids, np.array([1 if labels[i] >= 0 else 0 for i in ids], dtype=np.int64)


def evaluate_table(table: EmbeddingTable, labels: dict[str, float], spec: ModelSpec, k=10, seed=0) -> MetricReport:
    ids, y = user_labels(labels)
    return cross_validate(table.lookup(ids), y, spec, k, seed)
