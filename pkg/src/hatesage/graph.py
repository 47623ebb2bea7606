"""Directed retweet graph and per-node table.

The graph is held as two CSR arrays (out-adjacency and its transpose) over
dense ids ``0..node_count-1``.  Raw ids from input files are remapped and the
mapping is kept on the graph so predictions can be written back in the
original id space.
"""

from __future__ import annotations

import csv
import fnmatch
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "DirectedGraph",
    "EdgeListReport",
    "NodeTable",
    "NodeSchema",
    "Standardizer",
    "ParseError",
    "SchemaError",
    "ConvergenceError",
    "from_edges",
    "load_edge_list",
    "load_node_table",
    "neighbors",
    "compute_network_features",
    "eigenvector_centrality",
    "neighborhood_mean",
    "degree_stats",
    "save_store",
    "load_store",
]

DIRECTIONS = ("out", "in", "both")


class ParseError(ValueError):
    """Malformed input file; message carries file/line context."""


class SchemaError(ValueError):
    """Declared column missing from a table header."""


class ConvergenceError(ArithmeticError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


def _csr_from_pairs(src: np.ndarray, dst: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    # sorted, duplicate-free rows
    key = np.unique(np.asarray(src, dtype=np.int64) * n + np.asarray(dst, dtype=np.int64))
    rows, cols = np.divmod(key, n) if n else (key, key)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
    return indptr, cols.astype(np.int64)


class DirectedGraph:
    """Immutable simple directed graph without self-loops.

    ``indptr``/``indices`` hold the out-adjacency, ``rev_indptr``/``rev_indices``
    the in-adjacency.  Neighbor lists are sorted ascending.
    """

    def __init__(
        self,
        node_count: int,
        indptr: np.ndarray,
        indices: np.ndarray,
        ids: np.ndarray | None = None,
    ):
        indptr = np.asarray(indptr, dtype=np.int64)
        indices = np.asarray(indices, dtype=np.int64)
        if len(indptr) != node_count + 1 or indptr[-1] != len(indices):
            raise ValueError("inconsistent CSR arrays")
        self.node_count = int(node_count)
        self.indptr = indptr
        self.indices = indices
        src = np.repeat(np.arange(node_count), np.diff(indptr))
        if np.any(src == indices):
            raise ValueError("self-loops are not allowed")
        self.rev_indptr, self.rev_indices = _csr_from_pairs(indices, src, node_count)
        self.ids = np.arange(node_count, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        for a in (self.indptr, self.indices, self.rev_indptr, self.rev_indices, self.ids):
            a.flags.writeable = False

    @property
    def edge_count(self) -> int:
        return len(self.indices)

    def __repr__(self) -> str:
        return f"DirectedGraph(node_count={self.node_count}, edge_count={self.edge_count})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, DirectedGraph):
            return NotImplemented
        return (
            self.node_count == other.node_count
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
        )

    def edges(self) -> np.ndarray:
        """(edge_count, 2) array of (src, dst) pairs in CSR order."""
        src = np.repeat(np.arange(self.node_count), np.diff(self.indptr))
        return np.column_stack([src, self.indices])

    def transpose(self) -> "DirectedGraph":
        return DirectedGraph(self.node_count, self.rev_indptr, self.rev_indices, self.ids)

    @cached_property
    def _union(self) -> tuple[np.ndarray, np.ndarray]:
        e = self.edges()
        src = np.concatenate([e[:, 0], e[:, 1]])
        dst = np.concatenate([e[:, 1], e[:, 0]])
        indptr, indices = _csr_from_pairs(src, dst, self.node_count)
        indptr.flags.writeable = False
        indices.flags.writeable = False
        return indptr, indices

    def adjacency(self, direction: str = "both") -> tuple[np.ndarray, np.ndarray]:
        """CSR (indptr, indices) for the requested neighbor direction."""
        if direction == "out":
            return self.indptr, self.indices
        if direction == "in":
            return self.rev_indptr, self.rev_indices
        if direction == "both":
            return self._union
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")

    def degrees(self, direction: str = "both") -> np.ndarray:
        return np.diff(self.adjacency(direction)[0])

    def to_scipy(self, direction: str = "out") -> sp.csr_matrix:
        indptr, indices = self.adjacency(direction)
        data = np.ones(len(indices), dtype=np.float64)
        return sp.csr_matrix((data, indices, indptr), shape=(self.node_count, self.node_count))

    def with_isolated_nodes(self, count: int) -> "DirectedGraph":
        """Copy of the graph with ``count`` extra isolated nodes appended."""
        indptr = np.concatenate([self.indptr, np.full(count, self.indptr[-1])])
        start = int(self.ids.max()) + 1 if self.node_count else 0
        ids = np.concatenate([self.ids, np.arange(start, start + count)])
        return DirectedGraph(self.node_count + count, indptr, self.indices, ids)

    def dense_ids(self, raw_ids: Iterable[int]) -> np.ndarray:
        """Map original ids to dense ids; unknown ids raise KeyError."""
        lookup = self._id_lookup
        try:
            return np.array([lookup[int(r)] for r in raw_ids], dtype=np.int64)
        except KeyError as e:
            raise KeyError(f"unknown node id {e.args[0]}") from None

    @cached_property
    def _id_lookup(self) -> dict[int, int]:
        return {int(r): i for i, r in enumerate(self.ids)}


@dataclass(frozen=True)
class EdgeListReport:
    raw_rows: int
    self_loops: int
    duplicates: int
    edges: int


def from_edges(
    pairs: Iterable[tuple[int, int]] | np.ndarray,
    node_count: int | None = None,
) -> DirectedGraph:
    """Build a graph from dense-id pairs, dropping self-loops and duplicates."""
    arr = np.asarray(list(pairs) if not isinstance(pairs, np.ndarray) else pairs, dtype=np.int64)
    arr = arr.reshape(-1, 2)
    if node_count is None:
        node_count = int(arr.max()) + 1 if len(arr) else 0
    if len(arr) and (arr.min() < 0 or arr.max() >= node_count):
        raise ValueError("edge endpoint outside [0, node_count)")
    keep = arr[:, 0] != arr[:, 1]
    indptr, indices = _csr_from_pairs(arr[keep, 0], arr[keep, 1], node_count)
    return DirectedGraph(node_count, indptr, indices)


def load_edge_list(
    path: str | os.PathLike, delimiter: str = ","
) -> tuple[DirectedGraph, EdgeListReport]:
    """Read ``src<delim>dst`` rows.  A non-numeric first row is taken as a header.

    Ids may be arbitrary integers; they are remapped to dense ids in ascending
    order of the original id (``graph.ids`` keeps the mapping).
    """
    src: list[int] = []
    dst: list[int] = []
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(delimiter) if delimiter.strip() else line.split()
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected 2 columns, got {len(parts)}")
            try:
                a, b = int(parts[0]), int(parts[1])
            except ValueError:
                if lineno == 1 and not src:
                    continue  # header
                raise ParseError(f"{path}:{lineno}: non-integer node id in {line!r}") from None
            src.append(a)
            dst.append(b)
    if not src:
        raise ParseError(f"{path}: no edges found")
    raw = np.column_stack([np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64)])
    ids, dense = np.unique(raw, return_inverse=True)
    dense = dense.reshape(-1, 2)
    loops = int(np.sum(dense[:, 0] == dense[:, 1]))
    g = from_edges(dense, len(ids))
    g = DirectedGraph(g.node_count, g.indptr, g.indices, ids)
    report = EdgeListReport(
        raw_rows=len(raw),
        self_loops=loops,
        duplicates=len(raw) - loops - g.edge_count,
        edges=g.edge_count,
    )
    return g, report


def neighbors(graph: DirectedGraph, node: int, direction: str = "both") -> np.ndarray:
    if not 0 <= node < graph.node_count:
        raise IndexError(f"node {node} out of range [0, {graph.node_count})")
    indptr, indices = graph.adjacency(direction)
    return indices[indptr[node] : indptr[node + 1]]


# ---------------------------------------------------------------------------
# node table


@dataclass(frozen=True)
class NodeSchema:
    """Column mapping for a node table.

    Feature columns are given as glob patterns (``"glove_*"``) grouped by kind;
    kinds are ``text``, ``user`` and ``network``.
    """

    id: str = "user_id"
    label: str | None = "hate"
    group: str | None = None
    features: Mapping[str, Sequence[str]] = field(default_factory=dict)
    positive: tuple[str, ...] = ("hateful", "1", "true")
    negative: tuple[str, ...] = ("normal", "0", "false")


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        mean = x.mean(axis=0)
        # two-pass variance keeps the centered columns exactly unit-scaled
        std = np.sqrt(((x - mean) ** 2).mean(axis=0))
        return cls(mean, std)

    def transform(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros_like(x, dtype=np.float64)
        ok = self.std > 0
        out[:, ok] = (x[:, ok] - self.mean[ok]) / self.std[ok]
        return out


@dataclass
class NodeTable:
    """Per-node features, labels and group tags, rows aligned to dense ids.

    ``labels`` uses 1 (hateful), 0 (normal) and -1 (unlabeled).  ``features``
    holds the standardized matrix; ``raw_features`` the values as read.
    """

    features: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    feature_names: list[str]
    feature_kinds: list[str]
    raw_features: np.ndarray | None = None
    scaler: Standardizer | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.raw_features is None:
            self.raw_features = self.features.copy()
        n, d = self.features.shape
        if len(self.labels) != n or len(self.groups) != n:
            raise ValueError("features, labels and groups must have equal length")
        if len(self.feature_names) != d or len(self.feature_kinds) != d:
            raise ValueError("feature_names/feature_kinds must match feature width")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite feature values")

    @property
    def node_count(self) -> int:
        return self.features.shape[0]

    @property
    def labeled(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)

    def columns(self, kinds: Iterable[str] | None = None, names: Iterable[str] | None = None) -> np.ndarray:
        """Indices of feature columns matching the given kinds and/or names."""
        idx = np.arange(len(self.feature_names))
        if kinds is not None:
            kinds = set(kinds)
            idx = idx[[self.feature_kinds[i] in kinds for i in idx]]
        if names is not None:
            names = set(names)
            idx = idx[[self.feature_names[i] in names for i in idx]]
        return idx

    def standardized(self, rows: np.ndarray) -> "NodeTable":
        """Copy whose features are standardized with statistics from ``rows``."""
        scaler = Standardizer.fit(self.raw_features[rows])
        return NodeTable(
            scaler.transform(self.raw_features),
            self.labels,
            self.groups,
            list(self.feature_names),
            list(self.feature_kinds),
            raw_features=self.raw_features,
            scaler=scaler,
        )

    def with_features(self, values: np.ndarray, names: Sequence[str], kind: str) -> "NodeTable":
        """Append raw feature columns (the result is unstandardized)."""
        values = np.asarray(values, dtype=np.float64).reshape(self.node_count, -1)
        raw = np.hstack([self.raw_features, values])
        return NodeTable(
            raw,
            self.labels,
            self.groups,
            self.feature_names + list(names),
            self.feature_kinds + [kind] * len(names),
            raw_features=raw,
        )

    def label_counts(self) -> dict[str, int]:
        return {
            "hateful": int(np.sum(self.labels == 1)),
            "normal": int(np.sum(self.labels == 0)),
            "unlabeled": int(np.sum(self.labels < 0)),
        }


def _match_columns(header: list[str], patterns: Sequence[str], path) -> list[str]:
    out: list[str] = []
    for pat in patterns:
        hits = [h for h in header if fnmatch.fnmatchcase(h, pat)]
        if not hits:
            raise SchemaError(f"{path}: no column matches {pat!r}")
        out.extend(h for h in hits if h not in out)
    return out


def load_node_table(
    path: str | os.PathLike,
    schema: NodeSchema,
    graph: DirectedGraph | None = None,
    delimiter: str = ",",
) -> NodeTable:
    """Read a delimited node table with a header row.

    When ``graph`` is given, rows are placed at the graph's dense ids and nodes
    absent from the file get zero features and no label.  Features are
    standardized over the labeled rows.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        for col in (schema.id, schema.label, schema.group):
            if col is not None and col not in header:
                raise SchemaError(f"{path}: missing column {col!r}")
        names: list[str] = []
        kinds: list[str] = []
        for kind, pats in schema.features.items():
            for name in _match_columns(header, pats, path):
                if name not in names:
                    names.append(name)
                    kinds.append(kind)
        pos = {h: i for i, h in enumerate(header)}
        fcols = [pos[n] for n in names]
        ids, labels, groups, rows = [], [], [], []
        positive = {s.lower() for s in schema.positive}
        negative = {s.lower() for s in schema.negative}
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            try:
                ids.append(int(rec[pos[schema.id]]))
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad id {rec[pos[schema.id]]!r}") from None
            if schema.label is not None:
                lab = rec[pos[schema.label]].strip().lower()
                labels.append(1 if lab in positive else 0 if lab in negative else -1)
            else:
                labels.append(-1)
            groups.append(rec[pos[schema.group]].strip() if schema.group else "")
            row = []
            for c in fcols:
                try:
                    v = float(rec[c])
                except ValueError:
                    raise ParseError(
                        f"{path}:{lineno}: non-numeric value {rec[c]!r} in column {header[c]!r}"
                    ) from None
                if not np.isfinite(v):
                    raise ParseError(f"{path}:{lineno}: non-finite value in column {header[c]!r}")
                row.append(v)
            rows.append(row)
    if not ids:
        raise ParseError(f"{path}: no data rows")
    raw = np.array(rows, dtype=np.float64).reshape(len(ids), len(names))
    labels_arr = np.array(labels, dtype=np.int64)
    groups_arr = np.array(groups, dtype=object)
    if graph is not None:
        dense = graph.dense_ids(ids)
        n = graph.node_count
        full = np.zeros((n, len(names)))
        full[dense] = raw
        lab = np.full(n, -1, dtype=np.int64)
        lab[dense] = labels_arr
        grp = np.full(n, "", dtype=object)
        grp[dense] = groups_arr
        raw, labels_arr, groups_arr = full, lab, grp
    table = NodeTable(raw, labels_arr, groups_arr, names, kinds, raw_features=raw)
    labeled = table.labeled
    return table.standardized(labeled if len(labeled) else np.arange(table.node_count))


# ---------------------------------------------------------------------------
# network features


def eigenvector_centrality(
    graph: DirectedGraph, tol: float = 1e-8, max_iter: int = 1000
) -> np.ndarray:
    """Dominant eigenvector of the symmetrized adjacency, L2-normalized.

    Iterates with ``A + I`` so bipartite graphs (stars, paths) converge; the
    shift leaves the eigenvectors unchanged.
    """
    n = graph.node_count
    if n == 0:
        return np.zeros(0)
    a = graph.to_scipy("both")
    x = np.full(n, 1.0 / np.sqrt(n))
    residual = np.inf
    for _ in range(max_iter):
        y = a @ x + x
        norm = np.linalg.norm(y)
        if norm == 0:
            return x
        y /= norm
        residual = np.linalg.norm(y - x)
        x = y
        if residual < tol:
            return x
    raise ConvergenceError(f"eigenvector centrality did not converge in {max_iter} iterations", residual)


def neighborhood_mean(
    graph: DirectedGraph, values: np.ndarray, direction: str = "both"
) -> np.ndarray:
    """Mean of ``values`` rows over each node's neighbors (zero for isolated nodes)."""
    values = np.asarray(values, dtype=np.float64)
    a = graph.to_scipy(direction)
    deg = np.asarray(a.sum(axis=1)).ravel()
    out = a @ values
    nz = deg > 0
    out[nz] /= deg[nz].reshape(-1, *([1] * (values.ndim - 1)))
    return out


def compute_network_features(
    graph: DirectedGraph,
    table: NodeTable | None = None,
    aggregate: Sequence[str] = (),
    direction: str = "both",
    tol: float = 1e-8,
    max_iter: int = 1000,
) -> dict[str, np.ndarray]:
    cols = {
        "in_degree": graph.degrees("in").astype(np.float64),
        "out_degree": graph.degrees("out").astype(np.float64),
        "eigenvector": eigenvector_centrality(graph, tol, max_iter),
    }
    if aggregate:
        if table is None:
            raise ValueError("aggregate columns need a node table")
        idx = table.columns(names=aggregate)
        missing = set(aggregate) - {table.feature_names[i] for i in idx}
        if missing:
            raise SchemaError(f"unknown feature columns {sorted(missing)}")
        means = neighborhood_mean(graph, table.raw_features[:, idx], direction)
        for j, i in enumerate(idx):
            cols[f"nbr_mean_{table.feature_names[i]}"] = means[:, j]
    return cols


def degree_stats(graph: DirectedGraph) -> dict[str, float]:
    ind = graph.degrees("in")
    outd = graph.degrees("out")
    n = graph.node_count
    isolated = int(np.sum((ind == 0) & (outd == 0)))
    if n == 0:
        return {"node_count": 0, "edge_count": 0, "isolated": 0}
    return {
        "node_count": n,
        "edge_count": graph.edge_count,
        "min_in": int(ind.min()),
        "mean_in": float(ind.mean()),
        "max_in": int(ind.max()),
        "min_out": int(outd.min()),
        "mean_out": float(outd.mean()),
        "max_out": int(outd.max()),
        "isolated": isolated,
    }


# ---------------------------------------------------------------------------
# persisted store

CSR_FILE = "graph.csr"
IDMAP_FILE = "idmap.csv"
STATS_FILE = "standardization.csv"
NODES_FILE = "nodes.npz"


def save_store(directory: str | os.PathLike, graph: DirectedGraph, table: NodeTable | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / CSR_FILE, "wb") as fh:
        fh.write(np.array([graph.node_count, graph.edge_count], dtype="<u8").tobytes())
        fh.write(graph.indptr.astype("<u8").tobytes())
        fh.write(graph.indices.astype("<u8").tobytes())
    with open(d / IDMAP_FILE, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dense_id", "node_id"])
        w.writerows(enumerate(graph.ids.tolist()))
    if table is not None:
        scaler = table.scaler or Standardizer.fit(table.raw_features)
        with open(d / STATS_FILE, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["feature", "kind", "mean", "std"])
            for name, kind, m, s in zip(table.feature_names, table.feature_kinds, scaler.mean, scaler.std):
                w.writerow([name, kind, repr(float(m)), repr(float(s))])
        np.savez(
            d / NODES_FILE,
            raw_features=table.raw_features,
            labels=table.labels,
            groups=np.asarray(table.groups, dtype=str),
            feature_names=np.asarray(table.feature_names, dtype=str),
            feature_kinds=np.asarray(table.feature_kinds, dtype=str),
        )
    return d


def load_store(directory: str | os.PathLike) -> tuple[DirectedGraph, NodeTable | None]:
    d = Path(directory)
    blob = (d / CSR_FILE).read_bytes()
    n, m = np.frombuffer(blob[:16], dtype="<u8")
    n, m = int(n), int(m)
    indptr = np.frombuffer(blob[16 : 16 + 8 * (n + 1)], dtype="<u8").astype(np.int64)
    indices = np.frombuffer(blob[16 + 8 * (n + 1) :], dtype="<u8").astype(np.int64)
    if len(indices) != m:
        raise ParseError(f"{d / CSR_FILE}: expected {m} targets, found {len(indices)}")
    ids = np.zeros(n, dtype=np.int64)
    with open(d / IDMAP_FILE, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for rec in reader:
            ids[int(rec[0])] = int(rec[1])
    graph = DirectedGraph(n, indptr, indices, ids)
    table = None
    if (d / NODES_FILE).exists():
        z = np.load(d / NODES_FILE, allow_pickle=False)
        raw = z["raw_features"]
        table = NodeTable(
            raw,
            z["labels"],
            z["groups"].astype(object),
            z["feature_names"].tolist(),
            z["feature_kinds"].tolist(),
            raw_features=raw,
        )
        labeled = table.labeled
        table = table.standardized(labeled if len(labeled) else np.arange(table.node_count))
    return graph, table
