"""Graph samplers.

* :func:`sample_neighbors` builds the per-layer blocks used for minibatch
  GraphSAGE training.
* :func:`durw_sample` is a directed unbiased random walk crawler.
* :func:`diffusion_scores` / :func:`select_candidates` spread per-user seed
  scores over the graph and draw a stratified set of annotation candidates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .graph import DirectedGraph

__all__ = [
    "RngStream",
    "SampledBlock",
    "DurwResult",
    "sample_neighbors",
    "full_block",
    "durw_sample",
    "diffusion_scores",
    "select_candidates",
]


@dataclass(frozen=True)
class RngStream:
    """Named random stream; equal (seed, stream) pairs give equal draws."""

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, index: int) -> "RngStream":
        # fold the child index into the stream id deterministically
        return RngStream(self.seed, (self.stream * 1_000_003 + index + 1) % 2**63)


def _rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    return np.random.default_rng(rng)


@dataclass
class SampledBlock:
    """Layered neighbor sample rooted at a set of seed nodes.

    ``layer_nodes[0]`` are the seeds; ``layer_nodes[l + 1]`` starts with
    ``layer_nodes[l]`` followed by newly reached nodes.  For each
    ``l < depth``, the sampled neighbors of ``layer_nodes[l][i]`` are
    ``layer_nodes[l + 1][neighbor_index[l][offsets[l][i]:offsets[l][i + 1]]]``.
    """

    layer_nodes: list[np.ndarray]
    offsets: list[np.ndarray]
    neighbor_index: list[np.ndarray]
    fanouts: tuple[int, ...] = field(default=())

    @property
    def depth(self) -> int:
        return len(self.offsets)

    @property
    def seeds(self) -> np.ndarray:
        return self.layer_nodes[0]

    def sampled_neighbors(self, layer: int, i: int) -> np.ndarray:
        off = self.offsets[layer]
        return self.layer_nodes[layer + 1][self.neighbor_index[layer][off[i] : off[i + 1]]]

    def permuted(self, rng) -> "SampledBlock":
        """Same block with rows shuffled inside every segment."""
        gen = _rng(rng)
        new_index = []
        for off, idx in zip(self.offsets, self.neighbor_index):
            idx = idx.copy()
            for a, b in zip(off[:-1], off[1:]):
                idx[a:b] = gen.permutation(idx[a:b])
            new_index.append(idx)
        return SampledBlock(list(self.layer_nodes), list(self.offsets), new_index, self.fanouts)


def _next_layer(frontier: np.ndarray, picked: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    new = np.setdiff1d(picked, frontier)
    nodes = np.concatenate([frontier, new])
    order = np.argsort(nodes, kind="stable")
    pos = order[np.searchsorted(nodes[order], picked)]
    return nodes, pos


def sample_neighbors(
    graph: DirectedGraph,
    seeds,
    fanouts,
    direction: str = "both",
    rng=0,
) -> SampledBlock:
    """Draw ``min(degree, S_l)`` distinct neighbors per node, per layer.

    Sampling is uniform without replacement: every adjacency entry of the
    frontier gets a random key and the ``S_l`` smallest keys per node win.
    """
    seeds = np.asarray(seeds, dtype=np.int64).reshape(-1)
    if seeds.size == 0:
        raise ValueError("empty seed set")
    if len(np.unique(seeds)) != len(seeds):
        raise ValueError("duplicate seeds")
    if seeds.min() < 0 or seeds.max() >= graph.node_count:
        raise IndexError("seed outside graph")
    fanouts = tuple(int(s) for s in fanouts)
    if not fanouts or min(fanouts) < 1:
        raise ValueError("need at least one layer and fanouts >= 1")
    gen = _rng(rng)
    indptr, indices = graph.adjacency(direction)

    layers = [seeds]
    offsets, nbr_index = [], []
    frontier = seeds
    for s in fanouts:
        starts, ends = indptr[frontier], indptr[frontier + 1]
        deg = ends - starts
        total = int(deg.sum())
        seg = np.repeat(np.arange(len(frontier)), deg)
        # flat positions of every adjacency entry of the frontier
        base = np.repeat(starts - np.concatenate([[0], np.cumsum(deg)[:-1]]), deg)
        flat = base + np.arange(total)
        keys = gen.random(total)
        order = np.lexsort((keys, seg))
        rank = np.arange(total) - np.repeat(np.concatenate([[0], np.cumsum(deg)[:-1]]), deg)
        # keep adjacency order inside each segment so full neighborhoods are rng-free
        chosen = np.sort(order[rank < s])
        picked = indices[flat[chosen]]
        take = np.minimum(deg, s)
        off = np.concatenate([[0], np.cumsum(take)]).astype(np.int64)
        nodes, pos = _next_layer(frontier, picked)
        layers.append(nodes)
        offsets.append(off)
        nbr_index.append(pos.astype(np.int64))
        frontier = nodes
    return SampledBlock(layers, offsets, nbr_index, fanouts)


def full_block(graph: DirectedGraph, seeds, depth: int, direction: str = "both") -> SampledBlock:
    """Deterministic block holding complete neighborhoods (sorted by id)."""
    seeds = np.asarray(seeds, dtype=np.int64).reshape(-1)
    indptr, indices = graph.adjacency(direction)
    layers = [seeds]
    offsets, nbr_index = [], []
    frontier = seeds
    for _ in range(depth):
        deg = indptr[frontier + 1] - indptr[frontier]
        picked = np.concatenate([indices[indptr[v] : indptr[v + 1]] for v in frontier]) if len(frontier) else np.zeros(0, np.int64)
        off = np.concatenate([[0], np.cumsum(deg)]).astype(np.int64)
        nodes, pos = _next_layer(frontier, picked.astype(np.int64))
        layers.append(nodes)
        offsets.append(off)
        nbr_index.append(pos.astype(np.int64))
        frontier = nodes
    max_deg = int(np.diff(indptr).max()) if graph.node_count else 0
    return SampledBlock(layers, offsets, nbr_index, (max(max_deg, 1),) * depth)


# ---------------------------------------------------------------------------
# dataset-construction samplers


@dataclass
class DurwResult:
    nodes: np.ndarray  # distinct visited nodes, in order of first visit
    visits: np.ndarray  # per-node visit counts over the whole graph
    steps: int
    complete: bool  # False if the step cap ended the walk before the budget


def durw_sample(
    graph: DirectedGraph,
    start: int,
    jump_weight: float,
    budget: int,
    rng=0,
    steps: int | None = None,
) -> DurwResult:
    """Directed unbiased random walk.

    The walker moves on the undirected closure it has discovered so far: out
    edges of the current node are always usable, and an in-edge ``u -> v``
    becomes usable from ``v`` once ``u`` has been visited.  At node ``v`` it
    jumps to a uniformly random node with probability ``w / (w + d(v))``
    where ``d(v)`` is the known degree, otherwise it steps to a uniform known
    neighbor.  A node with no known neighbors always jumps.

    By default the walk stops once ``budget`` distinct nodes are seen or after
    ``100 * budget`` steps.  With ``steps`` set it runs exactly that many
    transitions (stopping early only if it would exceed the budget).
    """
    n = graph.node_count
    if not 0 <= start < n:
        raise IndexError(f"start node {start} outside graph")
    if not 1 <= budget <= n:
        raise ValueError("budget must lie in [1, node_count]")
    if jump_weight < 0:
        raise ValueError("jump_weight must be non-negative")
    gen = _rng(rng)
    out_ptr, out_idx = graph.indptr, graph.indices
    in_ptr, in_idx = graph.rev_indptr, graph.rev_indices

    visited = np.zeros(n, dtype=bool)
    visits = np.zeros(n, dtype=np.int64)
    order: list[int] = []
    # known neighbor lists grow as in-edges get revealed
    known: dict[int, list[int]] = {}

    def reveal(v: int):
        visited[v] = True
        order.append(v)
        nb = known.setdefault(v, [])
        seen = set(nb)
        for u in out_idx[out_ptr[v] : out_ptr[v + 1]]:
            u = int(u)
            if u not in seen:
                nb.append(u)
                seen.add(u)
            # v -> u revealed: u can now step back to v
            if visited[u]:
                lst = known.setdefault(u, [])
                if v not in lst:
                    lst.append(v)
        for u in in_idx[in_ptr[v] : in_ptr[v + 1]]:
            u = int(u)
            if visited[u] and u not in seen:
                nb.append(u)
                seen.add(u)

    reveal(start)
    visits[start] += 1
    cap = steps if steps is not None else 100 * budget
    cur = start
    taken = 0
    chunk = 65536
    draws = gen.random((chunk, 2))
    k = 0
    while taken < cap:
        if steps is None and len(order) >= budget:
            break
        if k == chunk:
            draws = gen.random((chunk, 2))
            k = 0
        r_jump, r_pick = draws[k]
        k += 1
        nb = known[cur]
        d = len(nb)
        if d == 0 or r_jump * (jump_weight + d) < jump_weight:
            nxt = int(r_pick * n)
        else:
            nxt = nb[int(r_pick * d)]
        if not visited[nxt]:
            if len(order) >= budget:
                break
            reveal(nxt)
        visits[nxt] += 1
        cur = nxt
        taken += 1
    return DurwResult(
        nodes=np.array(order, dtype=np.int64),
        visits=visits,
        steps=taken,
        complete=len(order) >= budget,
    )


def diffusion_scores(
    graph: DirectedGraph,
    seed_scores,
    alpha: float = 0.85,
    iterations: int = 20,
) -> np.ndarray:
    """Damped propagation ``p <- alpha * A_hat p + (1 - alpha) * p0``.

    ``A_hat`` is the row-normalized undirected adjacency; a node with no
    neighbors keeps its current score in the propagation term.
    """
    p0 = np.asarray(seed_scores, dtype=np.float64).reshape(-1)
    if p0.shape != (graph.node_count,):
        raise ValueError(f"seed_scores must have length {graph.node_count}")
    if not np.all(np.isfinite(p0)) or np.any(p0 < 0):
        raise ValueError("seed_scores must be finite and non-negative")
    if not 0 <= alpha < 1:
        raise ValueError("alpha must lie in [0, 1)")
    if alpha == 0:
        return p0.copy()
    a = graph.to_scipy("both")
    deg = np.asarray(a.sum(axis=1)).ravel()
    dangling = deg == 0
    inv = np.where(dangling, 0.0, 1.0 / np.where(dangling, 1.0, deg))
    a_hat = sp.diags(inv) @ a
    p = p0.copy()
    for _ in range(iterations):
        prop = a_hat @ p
        prop[dangling] = p[dangling]
        p = alpha * prop + (1 - alpha) * p0
    return p


def select_candidates(scores, strata: int = 4, per_stratum: int = 1, rng=0) -> np.ndarray:
    """Sample ``per_stratum`` nodes from each score-quantile bin.

    Nodes are ranked by score (ties by id) and split into ``strata`` bins of
    near-equal size.  Returns node ids, lowest stratum first.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if strata < 1:
        raise ValueError("strata must be >= 1")
    ranked = np.lexsort((np.arange(len(scores)), scores))
    bins = np.array_split(ranked, strata)
    short = [i for i, b in enumerate(bins) if len(b) < per_stratum]
    if short:
        raise ValueError(f"strata {short} hold fewer than {per_stratum} nodes")
    gen = _rng(rng)
    picks = [np.sort(gen.choice(b, size=per_stratum, replace=False)) for b in bins]
    return np.concatenate(picks).astype(np.int64)
