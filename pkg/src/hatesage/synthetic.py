"""Synthetic graphs for tests and demos."""

from __future__ import annotations

import numpy as np

from .graph import DirectedGraph, NodeTable, from_edges

__all__ = ["planted_partition", "path_graph"]


def planted_partition(
    block_size: int = 50,
    p_in: float = 0.3,
    p_out: float = 0.02,
    feature_dim: int = 8,
    seed: int = 0,
) -> tuple[DirectedGraph, NodeTable]:
    """Two-block directed random graph; label = block, features iid N(0, 1).

    Each ordered pair gets an edge independently, so the node features carry
    no information about the label.
    """
    rng = np.random.default_rng(seed)
    n = 2 * block_size
    block = np.repeat([0, 1], block_size)
    same = block[:, None] == block[None, :]
    prob = np.where(same, p_in, p_out)
    adj = rng.random((n, n)) < prob
    np.fill_diagonal(adj, False)
    src, dst = np.nonzero(adj)
    graph = from_edges(np.column_stack([src, dst]), n)
    x = rng.normal(size=(n, feature_dim))
    names = [f"f{i}" for i in range(feature_dim)]
    table = NodeTable(x, block, np.full(n, "other", dtype=object), names, ["text"] * feature_dim)
    return graph, table


def path_graph(n: int) -> DirectedGraph:
    """Path 0-1-...-(n-1) with edges in both directions."""
    pairs = [(i, i + 1) for i in range(n - 1)] + [(i + 1, i) for i in range(n - 1)]
    return from_edges(pairs, n)
