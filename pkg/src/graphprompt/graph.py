"""Graph data model, TU benchmark ingestion and synthetic graph generation."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, IngestionError

log = logging.getLogger(__name__)

FEATURE_DTYPE = np.float32


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    """Simple undirected graph stored as CSR adjacency plus node features.

    Build instances with :meth:`from_edges`, which canonicalises the edge set
    (symmetric, deduplicated, no self-loops, ascending neighbours per row).
    """

    num_nodes: int
    csr_offsets: np.ndarray
    csr_targets: np.ndarray
    features: np.ndarray
    node_labels: np.ndarray | None = None
    graph_label: int | None = None

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.num_nodes:
            raise ValueError(
                f"features must be ({self.num_nodes}, d), got {self.features.shape}"
            )
        if self.features.shape[1] < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.csr_offsets.shape != (self.num_nodes + 1,):
            raise ValueError("csr_offsets must have num_nodes + 1 entries")
        if self.node_labels is not None and self.node_labels.shape != (self.num_nodes,):
            raise ValueError("node_labels must have one entry per node")

    @classmethod
    def from_edges(
        cls,
        num_nodes: int,
        edges,
        features=None,
        node_labels=None,
        graph_label: int | None = None,
    ) -> "Graph":
        """Canonicalise an arbitrary edge list into a :class:`Graph`.

        ``edges`` is any ``(m, 2)`` integer array-like; direction, duplicates
        and self-loops are ignored. Missing features default to a constant
        column of ones.
        """
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= num_nodes):
            raise ValueError("edge endpoint out of range")
        e = e[e[:, 0] != e[:, 1]]
        both = np.concatenate([e, e[:, ::-1]], axis=0)
        both = np.unique(both, axis=0) if both.size else both.reshape(0, 2)
        # np.unique sorts lexicographically: rows grouped by source, targets ascending
        counts = np.bincount(both[:, 0], minlength=num_nodes) if both.size else np.zeros(num_nodes, np.int64)
        offsets = np.zeros(num_nodes + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        if features is None:
            features = np.ones((num_nodes, 1), dtype=FEATURE_DTYPE)
        features = np.asarray(features, dtype=FEATURE_DTYPE)
        if node_labels is not None:
            node_labels = _frozen(np.asarray(node_labels, dtype=np.int64))
        return cls(
            num_nodes=int(num_nodes),
            csr_offsets=_frozen(offsets),
            csr_targets=_frozen(both[:, 1].astype(np.int64)),
            features=_frozen(features),
            node_labels=node_labels,
            graph_label=None if graph_label is None else int(graph_label),
        )

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def num_edges(self) -> int:
        """Number of undirected edges."""
        return int(self.csr_targets.shape[0] // 2)

    def neighbors(self, v: int) -> np.ndarray:
        return self.csr_targets[self.csr_offsets[v]:self.csr_offsets[v + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.csr_offsets)

    def has_edge(self, u: int, v: int) -> bool:
        nb = self.neighbors(u)
        i = np.searchsorted(nb, v)
        return bool(i < nb.shape[0] and nb[i] == v)

    def half_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(src, dst)`` arrays listing every directed half-edge."""
        src = np.repeat(np.arange(self.num_nodes, dtype=np.int64), self.degrees())
        return src, self.csr_targets

    def undirected_edges(self) -> np.ndarray:
        src, dst = self.half_edges()
        keep = src < dst
        return np.stack([src[keep], dst[keep]], axis=1)

    def permute(self, perm: Sequence[int]) -> "Graph":
        """Relabel nodes so that old node ``i`` becomes new node ``perm[i]``."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.shape[0])
        labels = None if self.node_labels is None else self.node_labels[inv]
        return Graph.from_edges(
            self.num_nodes,
            perm[self.undirected_edges()],
            self.features[inv],
            labels,
            self.graph_label,
        )


@dataclass(frozen=True, eq=False)
class GraphCollection:
    graphs: tuple[Graph, ...]
    name: str
    feature_dim: int
    node_class_count: int | None = None
    graph_class_count: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for g in self.graphs:
            if g.feature_dim != self.feature_dim:
                raise ValueError("all graphs must share feature_dim")

    def __len__(self):
        return len(self.graphs)

    def __getitem__(self, i):
        return self.graphs[i]

    def __iter__(self):
        return iter(self.graphs)

    def summary(self) -> dict:
        n = np.array([g.num_nodes for g in self.graphs], dtype=float)
        m = np.array([g.num_edges for g in self.graphs], dtype=float)
        return {
            "name": self.name,
            "graphs": len(self.graphs),
            "avg_nodes": float(n.mean()) if n.size else 0.0,
            "avg_edges": float(m.mean()) if m.size else 0.0,
            "feature_dim": self.feature_dim,
            "node_classes": self.node_class_count,
            "graph_classes": self.graph_class_count,
        }


# ---------------------------------------------------------------------------
# TU benchmark format
# ---------------------------------------------------------------------------

_SPLIT = re.compile(r"\s*,\s*|\s+")


def _read_lines(path: Path) -> list[tuple[int, str]]:
    with path.open("r") as fh:
        return [(i, line.strip()) for i, line in enumerate(fh, start=1) if line.strip()]


def _parse_ints(path: Path) -> list[int]:
    out = []
    for lineno, line in _read_lines(path):
        try:
            out.append(int(line))
        except ValueError:
            raise FormatError(f"{path.name}:{lineno}: expected an integer, got {line!r}") from None
    return out


def _remap(values) -> tuple[np.ndarray, int]:
    uniq, inv = np.unique(np.asarray(values, dtype=np.int64), return_inverse=True)
    return inv.astype(np.int64), int(uniq.shape[0])


def load_tu_dataset(directory, name: str) -> GraphCollection:
    """Read a dataset in the TU benchmark text format.

    Node features are taken from ``<name>_node_attributes.txt`` when present,
    otherwise from a one-hot encoding of the node labels, otherwise a constant
    1.0 column. Graph and node labels are remapped to contiguous ids from 0.
    """
    directory = Path(directory)
    paths = {
        key: directory / f"{name}_{key}.txt"
        for key in ("A", "graph_indicator", "graph_labels", "node_labels", "node_attributes")
    }
    for key in ("A", "graph_indicator", "graph_labels"):
        if not paths[key].is_file():
            raise IngestionError(f"missing mandatory file {paths[key].name} in {directory}")

    indicator = np.asarray(_parse_ints(paths["graph_indicator"]), dtype=np.int64)
    n_total = indicator.shape[0]
    graph_ids = np.unique(indicator)
    raw_graph_labels = _parse_ints(paths["graph_labels"])
    if graph_ids.size and (graph_ids[0] < 1 or graph_ids[-1] > len(raw_graph_labels)):
        raise FormatError(
            f"{paths['graph_indicator'].name}: graph ids span {graph_ids[0]}..{graph_ids[-1]} "
            f"but {paths['graph_labels'].name} lists {len(raw_graph_labels)} graphs"
        )

    edges = []
    for lineno, line in _read_lines(paths["A"]):
        parts = _SPLIT.split(line)
        if len(parts) != 2:
            raise FormatError(f"{paths['A'].name}:{lineno}: expected 'i, j', got {line!r}")
        try:
            i, j = int(parts[0]), int(parts[1])
        except ValueError:
            raise FormatError(f"{paths['A'].name}:{lineno}: non-integer node id in {line!r}") from None
        for node in (i, j):
            if node < 1 or node > n_total:
                raise FormatError(
                    f"{paths['A'].name}:{lineno}: node {node} does not exist "
                    f"(dataset has {n_total} nodes)"
                )
        if indicator[i - 1] != indicator[j - 1]:
            raise FormatError(
                f"{paths['A'].name}:{lineno}: edge ({i}, {j}) joins graphs "
                f"{indicator[i - 1]} and {indicator[j - 1]}; a node cannot belong to two graphs"
            )
        edges.append((i - 1, j - 1))
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)

    node_labels = None
    node_class_count = None
    if paths["node_labels"].is_file():
        raw = _parse_ints(paths["node_labels"])
        if len(raw) != n_total:
            raise FormatError(
                f"{paths['node_labels'].name}: {len(raw)} labels for {n_total} nodes"
            )
        node_labels, node_class_count = _remap(raw)

    if paths["node_attributes"].is_file():
        rows = []
        for lineno, line in _read_lines(paths["node_attributes"]):
            try:
                rows.append([float(x) for x in _SPLIT.split(line) if x])
            except ValueError:
                raise FormatError(f"{paths['node_attributes'].name}:{lineno}: bad number in {line!r}") from None
        if len(rows) != n_total or len({len(r) for r in rows}) > 1:
            raise FormatError(
                f"{paths['node_attributes'].name}: expected {n_total} rows of equal width"
            )
        features = np.asarray(rows, dtype=FEATURE_DTYPE).reshape(n_total, -1)
    elif node_labels is not None:
        features = np.eye(node_class_count, dtype=FEATURE_DTYPE)[node_labels]
    else:
        features = np.ones((n_total, 1), dtype=FEATURE_DTYPE)

    graph_labels_remapped, graph_class_count = _remap(
        [raw_graph_labels[g - 1] for g in graph_ids]
    )

    # group nodes by graph id, keeping global order within each graph
    order = np.argsort(indicator, kind="stable")
    starts = np.searchsorted(indicator[order], graph_ids, side="left")
    ends = np.searchsorted(indicator[order], graph_ids, side="right")
    local = np.empty(n_total, dtype=np.int64)
    for s, e in zip(starts, ends):
        local[order[s:e]] = np.arange(e - s)
    edge_graph = indicator[edges[:, 0]] if edges.size else np.zeros(0, np.int64)
    edge_order = np.argsort(edge_graph, kind="stable")
    e_starts = np.searchsorted(edge_graph[edge_order], graph_ids, side="left")
    e_ends = np.searchsorted(edge_graph[edge_order], graph_ids, side="right")

    graphs = []
    for gi, (s, e, es, ee) in enumerate(zip(starts, ends, e_starts, e_ends)):
        nodes = order[s:e]
        ge = edges[edge_order[es:ee]]
        graphs.append(
            Graph.from_edges(
                len(nodes),
                local[ge],
                features[nodes],
                None if node_labels is None else node_labels[nodes],
                int(graph_labels_remapped[gi]),
            )
        )
    return GraphCollection(
        graphs=tuple(graphs),
        name=name,
        feature_dim=int(features.shape[1]),
        node_class_count=node_class_count,
        graph_class_count=graph_class_count,
    )


def write_tu_dataset(collection: GraphCollection, directory, name: str | None = None) -> Path:
    """Write ``collection`` in TU format; features go to node_attributes."""
    name = name or collection.name
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    a_lines, ind_lines, glabel_lines, nlabel_lines, attr_lines = [], [], [], [], []
    has_node_labels = all(g.node_labels is not None for g in collection) and len(collection) > 0
    base = 0
    for gid, g in enumerate(collection, start=1):
        src, dst = g.half_edges()
        a_lines.extend(f"{s + base + 1}, {d + base + 1}" for s, d in zip(src.tolist(), dst.tolist()))
        ind_lines.extend([str(gid)] * g.num_nodes)
        glabel_lines.append(str(0 if g.graph_label is None else g.graph_label))
        if has_node_labels:
            nlabel_lines.extend(str(x) for x in g.node_labels.tolist())
        attr_lines.extend(", ".join(repr(float(x)) for x in row) for row in g.features.tolist())
        base += g.num_nodes

    def put(key, lines):
        (directory / f"{name}_{key}.txt").write_text("".join(line + "\n" for line in lines))

    put("A", a_lines)
    put("graph_indicator", ind_lines)
    put("graph_labels", glabel_lines)
    put("node_attributes", attr_lines)
    if has_node_labels:
        put("node_labels", nlabel_lines)
    return directory


# ---------------------------------------------------------------------------
# Synthetic graphs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the planted-partition generator.

    Edges inside a node class appear with probability ``edge_prob``; edges
    across node classes with ``edge_prob * cross_factor``. Node features are
    Gaussian around a mean that depends on the node class and the graph class.
    """

    num_graphs: int = 1
    nodes_per_graph: int | tuple[int, int] = 20
    edge_prob: float = 0.2
    feature_dim: int = 8
    node_class_count: int = 2
    graph_class_count: int = 2
    cross_factor: float = 1.0
    separation: float = 2.0
    noise: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.edge_prob <= 1.0:
            raise ValueError("edge_prob must lie in [0, 1]")
        if not 0.0 <= self.cross_factor <= 1.0:
            raise ValueError("cross_factor must lie in [0, 1]")
        sizes = self.nodes_per_graph if isinstance(self.nodes_per_graph, tuple) else (self.nodes_per_graph,)
        for count in (self.num_graphs, self.feature_dim, self.node_class_count,
                      self.graph_class_count, *sizes):
            if int(count) < 1:
                raise ValueError("counts must be >= 1")


def generate_synthetic(spec: SyntheticSpec, seed: int, name: str = "synthetic") -> GraphCollection:
    rng = np.random.default_rng(seed)
    node_means = rng.normal(size=(spec.node_class_count, spec.feature_dim)) * spec.separation
    graph_means = rng.normal(size=(spec.graph_class_count, spec.feature_dim)) * spec.separation
    graphs = []
    for gi in range(spec.num_graphs):
        if isinstance(spec.nodes_per_graph, tuple):
            lo, hi = spec.nodes_per_graph
            n = int(rng.integers(lo, hi + 1))
        else:
            n = int(spec.nodes_per_graph)
        glabel = gi % spec.graph_class_count
        labels = rng.integers(0, spec.node_class_count, size=n)
        iu, ju = np.triu_indices(n, k=1)
        prob = np.where(labels[iu] == labels[ju], spec.edge_prob, spec.edge_prob * spec.cross_factor)
        keep = rng.random(iu.shape[0]) < prob
        feats = node_means[labels] + graph_means[glabel] + rng.normal(size=(n, spec.feature_dim)) * spec.noise
        graphs.append(
            Graph.from_edges(n, np.stack([iu[keep], ju[keep]], axis=1), feats, labels, glabel)
        )
    return GraphCollection(
        graphs=tuple(graphs),
        name=name,
        feature_dim=spec.feature_dim,
        node_class_count=spec.node_class_count,
        graph_class_count=spec.graph_class_count,
    )
