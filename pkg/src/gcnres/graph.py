"""Graph storage, normalization, subgraphs, synthetic data and dataset files.

Graphs are held in compressed sparse-row form.  Undirected graphs are stored
as symmetric directed graphs (every edge appears once in each direction).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .binio import Reader, Writer
from .errors import ParseError, RangeError, ValidationError

DATASET_MAGIC = b"GCNT"
DATASET_VERSION = 1


def _same(a, b):
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and np.array_equal(a, b)


@dataclass(eq=False)
class CsrGraph:
    num_nodes: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    edge_weights: Optional[np.ndarray] = None
    edge_features: Optional[np.ndarray] = None

    def __post_init__(self):
        self.num_nodes = int(self.num_nodes)
        self.row_offsets = np.asarray(self.row_offsets, dtype=np.int64)
        self.col_indices = np.asarray(self.col_indices, dtype=np.int64)
        if self.edge_weights is not None:
            self.edge_weights = np.asarray(self.edge_weights, dtype=np.float64)
        if self.edge_features is not None:
            self.edge_features = np.asarray(self.edge_features, dtype=np.float64)
        self.validate()

    def validate(self):
        n, ro, ci = self.num_nodes, self.row_offsets, self.col_indices
        if n < 0:
            raise ValidationError("num_nodes must be non-negative")
        if ro.ndim != 1 or ro.size != n + 1:
            raise ValidationError(f"row_offsets must have length num_nodes+1={n + 1}")
        if ro[0] != 0 or ro[-1] != ci.size:
            raise ValidationError("row_offsets must start at 0 and end at len(col_indices)")
        if np.any(np.diff(ro) < 0):
            raise ValidationError("row_offsets must be non-decreasing")
        if ci.size and (ci.min() < 0 or ci.max() >= n):
            raise ValidationError("col_indices out of range")
        # strictly increasing within a row: every step inside a row must be positive
        if ci.size > 1:
            steps = np.diff(ci)
            same_row = np.ones(ci.size - 1, dtype=bool)
            boundaries = ro[1:-1]
            boundaries = boundaries[(boundaries > 0) & (boundaries < ci.size)]
            same_row[boundaries - 1] = False
            if np.any(steps[same_row] <= 0):
                raise ValidationError("col_indices must be strictly increasing within each row")
        if self.edge_weights is not None and self.edge_weights.shape != (ci.size,):
            raise ValidationError("edge_weights must have one entry per edge")
        if self.edge_features is not None and (
            self.edge_features.ndim != 2 or self.edge_features.shape[0] != ci.size
        ):
            raise ValidationError("edge_features must be a (num_edges x d) matrix")

    @classmethod
    def from_edges(cls, num_nodes, src, dst, weights=None, features=None, symmetrize=False):
        """Build a CSR graph from an edge list.

        Duplicate edges are collapsed keeping the first occurrence.  With
        ``symmetrize`` every edge is also inserted in the reverse direction.
        """
        src = np.asarray(src, dtype=np.int64).ravel()
        dst = np.asarray(dst, dtype=np.int64).ravel()
        if src.shape != dst.shape:
            raise ValidationError("src and dst must have equal length")
        if weights is not None:
            weights = np.asarray(weights, dtype=np.float64).ravel()
        if features is not None:
            features = np.asarray(features, dtype=np.float64)
            if features.ndim == 1:
                features = features[:, None]
        if symmetrize:
            src, dst = np.concatenate([src, dst]), np.concatenate([dst, src])
            if weights is not None:
                weights = np.concatenate([weights, weights])
            if features is not None:
                features = np.concatenate([features, features])
        if src.size and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= num_nodes):
            raise RangeError(f"edge endpoint outside [0, {num_nodes})")
        order = np.lexsort((dst, src))
        src, dst = src[order], dst[order]
        keep = np.ones(src.size, dtype=bool)
        if src.size > 1:
            keep[1:] = (src[1:] != src[:-1]) | (dst[1:] != dst[:-1])
        order = order[keep]
        src, dst = src[keep], dst[keep]
        offsets = np.zeros(num_nodes + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=num_nodes), out=offsets[1:])
        return cls(
            num_nodes,
            offsets,
            dst,
            None if weights is None else weights[order],
            None if features is None else features[order],
        )

    @property
    def num_edges(self) -> int:
        return int(self.col_indices.size)

    def degrees(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_nodes, dtype=np.int64), self.degrees())

    def neighbors(self, i) -> np.ndarray:
        return self.col_indices[self.row_offsets[i] : self.row_offsets[i + 1]]

    def edge_set(self) -> set:
        return set(zip(self.row_ids().tolist(), self.col_indices.tolist()))

    def has_self_loops(self) -> bool:
        return bool(np.any(self.row_ids() == self.col_indices))

    def is_symmetric(self) -> bool:
        rows = self.row_ids()
        fwd = rows * self.num_nodes + self.col_indices
        rev = np.sort(self.col_indices * self.num_nodes + rows)
        return np.array_equal(fwd, rev)

    def to_scipy(self) -> sp.csr_matrix:
        data = self.edge_weights if self.edge_weights is not None else np.ones(self.num_edges)
        return sp.csr_matrix(
            (data, self.col_indices, self.row_offsets), shape=(self.num_nodes, self.num_nodes)
        )

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.num_nodes, self.num_nodes))
        data = self.edge_weights if self.edge_weights is not None else np.ones(self.num_edges)
        out[self.row_ids(), self.col_indices] = data
        return out

    def __eq__(self, other):
        if not isinstance(other, CsrGraph):
            return NotImplemented
        return (
            self.num_nodes == other.num_nodes
            and np.array_equal(self.row_offsets, other.row_offsets)
            and np.array_equal(self.col_indices, other.col_indices)
            and _same(self.edge_weights, other.edge_weights)
            and _same(self.edge_features, other.edge_features)
        )


@dataclass(eq=False)
class NormalizedAdjacency(CsrGraph):
    """CSR graph with self-loops whose weights hold D^-1/2 (A+I) D^-1/2."""

    _matrix: Optional[sp.csr_matrix] = field(default=None, repr=False)

    @property
    def matrix(self) -> sp.csr_matrix:
        if self._matrix is None:
            self._matrix = self.to_scipy()
        return self._matrix


def symmetric_normalize(graph: CsrGraph) -> NormalizedAdjacency:
    if graph.has_self_loops():
        raise ValidationError("symmetric_normalize expects a graph without self-loops")
    if not graph.is_symmetric():
        raise ValidationError("symmetric_normalize expects a symmetric graph")
    n = graph.num_nodes
    deg_hat = graph.degrees().astype(np.float64) + 1.0
    rows = np.concatenate([graph.row_ids(), np.arange(n)])
    cols = np.concatenate([graph.col_indices, np.arange(n)])
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    inv_sqrt = 1.0 / np.sqrt(deg_hat)
    weights = inv_sqrt[rows] * inv_sqrt[cols]
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=offsets[1:])
    return NormalizedAdjacency(n, offsets, cols, weights)


def induced_subgraph(graph: CsrGraph, nodes):
    """Subgraph on ``nodes``; new id of ``nodes[i]`` is ``i``.

    Returns ``(subgraph, old_to_new)`` where ``old_to_new`` is -1 for nodes
    outside the set.
    """
    nodes = np.asarray(nodes, dtype=np.int64).ravel()
    if nodes.size and (nodes.min() < 0 or nodes.max() >= graph.num_nodes):
        raise RangeError("subgraph node outside the graph")
    if np.unique(nodes).size != nodes.size:
        raise ValidationError("subgraph nodes must be unique")
    old_to_new = np.full(graph.num_nodes, -1, dtype=np.int64)
    old_to_new[nodes] = np.arange(nodes.size)
    rows = graph.row_ids()
    keep = (old_to_new[rows] >= 0) & (old_to_new[graph.col_indices] >= 0)
    src = old_to_new[rows[keep]]
    dst = old_to_new[graph.col_indices[keep]]
    w = None if graph.edge_weights is None else graph.edge_weights[keep]
    f = None if graph.edge_features is None else graph.edge_features[keep]
    return CsrGraph.from_edges(nodes.size, src, dst, w, f), old_to_new


def aggregate_edge_features(graph: CsrGraph) -> np.ndarray:
    """Per-node sum of the features of its stored (outgoing) edges."""
    if graph.edge_features is None:
        raise ValidationError("graph carries no edge features")
    out = np.zeros((graph.num_nodes, graph.edge_features.shape[1]))
    np.add.at(out, graph.row_ids(), graph.edge_features)
    return out


def load_edge_list(path, num_nodes: int) -> CsrGraph:
    """Read a whitespace separated ``src dst`` file into a symmetric graph.

    Blank lines and ``#`` comments are skipped; self-loops are dropped.
    """
    src, dst = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(f"expected 'src dst', got {line!r}", lineno)
            try:
                a, b = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(f"non-integer node id in {line!r}", lineno) from None
            if not (0 <= a < num_nodes and 0 <= b < num_nodes):
                raise RangeError(f"line {lineno}: node id outside [0, {num_nodes})")
            if a != b:
                src.append(a)
                dst.append(b)
    return CsrGraph.from_edges(num_nodes, src, dst, symmetrize=True)


def load_index_file(path) -> np.ndarray:
    with open(path) as fh:
        vals = []
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                vals.append(int(line))
            except ValueError:
                raise ParseError(f"bad index {line!r}", lineno) from None
    return np.asarray(vals, dtype=np.int64)


def load_splits(train_path, valid_path, test_path):
    return tuple(load_index_file(p) for p in (train_path, valid_path, test_path))


@dataclass(eq=False)
class Dataset:
    graph: CsrGraph
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.num_classes = int(self.num_classes)
        self.train = np.asarray(self.train, dtype=np.int64)
        self.valid = np.asarray(self.valid, dtype=np.int64)
        self.test = np.asarray(self.test, dtype=np.int64)
        self.validate()

    def validate(self):
        n = self.graph.num_nodes
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValidationError("feature matrix must have one row per node")
        if self.labels.shape != (n,):
            raise ValidationError("labels must have one entry per node")
        if self.labels.size and (self.labels.max() >= self.num_classes or self.labels.min() < -1):
            raise ValidationError(
                f"labels must lie in [-1, num_classes={self.num_classes})"
            )
        splits = [self.train, self.valid, self.test]
        for s in splits:
            if s.size and (s.min() < 0 or s.max() >= n):
                raise RangeError("split index outside the graph")
            if np.unique(s).size != s.size:
                raise ValidationError("split contains duplicate indices")
        allidx = np.concatenate(splits)
        if np.unique(allidx).size != allidx.size:
            raise ValidationError("train/valid/test splits overlap")
        if np.any(self.labels[self.train] < 0):
            raise ValidationError("every train node needs a label")

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    def split(self, name: str) -> np.ndarray:
        if name not in ("train", "valid", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def with_features(self, features) -> "Dataset":
        return replace(self, features=features)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.graph == other.graph
            and self.num_classes == other.num_classes
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and all(
                np.array_equal(getattr(self, s), getattr(other, s))
                for s in ("train", "valid", "test")
            )
        )


def generate_sbm(block_sizes, p_in, p_out, feature_dim, feature_signal, seed) -> Dataset:
    """Planted-partition graph with class-signal features.

    Class means are the first ``len(block_sizes)`` standard basis vectors, so
    they are orthonormal.  ``feature_signal`` trades class mean against
    unit Gaussian noise.
    """
    block_sizes = [int(b) for b in block_sizes]
    if not block_sizes or min(block_sizes) < 1:
        raise ValidationError("blocks must be non-empty")
    for name, p in (("p_in", p_in), ("p_out", p_out), ("feature_signal", feature_signal)):
        if not 0.0 <= p <= 1.0:
            raise ValidationError(f"{name} must lie in [0, 1]")
    k = len(block_sizes)
    if feature_dim < k:
        raise ValidationError("feature_dim must be at least the number of blocks")
    rng = np.random.default_rng(seed)
    n = sum(block_sizes)
    labels = np.repeat(np.arange(k), block_sizes)
    iu, ju = np.triu_indices(n, 1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    hit = rng.random(iu.size) < prob
    graph = CsrGraph.from_edges(n, iu[hit], ju[hit], symmetrize=True)

    means = np.eye(k, feature_dim)
    noise = rng.standard_normal((n, feature_dim))
    features = feature_signal * means[labels] + (1.0 - feature_signal) * noise

    train, valid, test = [], [], []
    for c in range(k):
        members = rng.permutation(np.flatnonzero(labels == c))
        n_tr = int(0.6 * members.size)
        n_va = int(0.2 * members.size)
        train.append(members[:n_tr])
        valid.append(members[n_tr : n_tr + n_va])
        test.append(members[n_tr + n_va :])
    train, valid, test = (np.sort(np.concatenate(s)) for s in (train, valid, test))
    return Dataset(graph, features, labels, k, train, valid, test, name="sbm")


def save_dataset(dataset: Dataset, path) -> None:
    """Write the ``GCNT`` container.

    Layout: magic, u32 version, u64 dims (nodes, feature dim, classes, edges,
    edge-feature dim, has-weights), f64 features, i64 labels, three
    length-prefixed u64 index arrays, then the CSR graph section.
    """
    g = dataset.graph
    de = 0 if g.edge_features is None else g.edge_features.shape[1]
    with open(path, "wb") as fh:
        w = Writer(fh)
        w.magic(DATASET_MAGIC, DATASET_VERSION)
        for dim in (
            g.num_nodes,
            dataset.features.shape[1],
            dataset.num_classes,
            g.num_edges,
            de,
            int(g.edge_weights is not None),
        ):
            w.u64(dim)
        w.array(dataset.features, "<f8")
        w.array(dataset.labels, "<i8")
        for s in (dataset.train, dataset.valid, dataset.test):
            w.u64_array(s)
        w.array(g.row_offsets, "<u8")
        w.array(g.col_indices, "<u8")
        if g.edge_weights is not None:
            w.array(g.edge_weights, "<f8")
        if de:
            w.array(g.edge_features, "<f8")
        w.string(dataset.name)


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        r = Reader(fh)
        r.magic(DATASET_MAGIC, DATASET_VERSION)
        n, d, c, m, de, has_w = (r.u64() for _ in range(6))
        features = r.array(n * d, "<f8", (n, d))
        labels = r.array(n, "<i8")
        train, valid, test = r.u64_array(), r.u64_array(), r.u64_array()
        offsets = r.array(n + 1, "<u8").astype(np.int64)
        cols = r.array(m, "<u8").astype(np.int64)
        weights = r.array(m, "<f8") if has_w else None
        efeat = r.array(m * de, "<f8", (m, de)) if de else None
        name = r.string()
        r.expect_eof()
    if labels.size and labels.max() >= c:
        raise ValidationError(f"header declares {c} classes but labels reach {labels.max()}")
    graph = CsrGraph(n, offsets, cols, weights, efeat)
    return Dataset(graph, features, labels, c, train, valid, test, name=name)


def dataset_summary(dataset: Dataset, metric: str = "accuracy") -> str:
    """Table-style summary: nodes, undirected edges, classes, metric."""
    undirected = dataset.graph.num_edges // 2
    header = f"{'Dataset':<12}{'Nodes':>10}{'Edges':>10}{'Classes':>9}  Metric"
    row = (
        f"{dataset.name:<12}{dataset.num_nodes:>10}{undirected:>10}"
        f"{dataset.num_classes:>9}  {metric}"
    )
    splits = (
        f"splits: train={dataset.train.size} valid={dataset.valid.size} test={dataset.test.size}"
    )
    return "\n".join([header, row, splits]) + "\n"


def read_dataset_files(
    edge_list, num_nodes, features_path, labels_path, train_path, valid_path, test_path,
    num_classes=None, name=None,
) -> Dataset:
    """Ingest pre-converted text files into a Dataset."""
    graph = load_edge_list(edge_list, num_nodes)
    features = np.loadtxt(features_path, dtype=np.float64, ndmin=2)
    labels = load_index_file(labels_path)
    train, valid, test = load_splits(train_path, valid_path, test_path)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return Dataset(graph, features, labels, num_classes, train, valid, test,
                   name=name or Path(edge_list).stem)
