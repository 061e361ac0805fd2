"""Embeddings for bipartite heterogeneous user-tweet graphs, with baselines and evaluation."""

__version__ = "0.1.0"
