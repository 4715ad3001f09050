"""Contextual subgraphs, (prompted) sum ReadOut and cosine similarity."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError
from .graph import Graph

COSINE_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class Subgraph:
    parent: Graph
    nodes: np.ndarray  # sorted node indices
    edges: np.ndarray  # induced undirected edges (u < v), shape (m, 2)

    def __len__(self):
        return int(self.nodes.shape[0])


@dataclass(frozen=True, eq=False)
class PromptVector:
    values: np.ndarray

    def __post_init__(self):
        if np.ndim(self.values) != 1:
            raise ShapeError("PromptVector", np.shape(self.values))


@dataclass(frozen=True, eq=False)
class PromptMatrix:
    values: np.ndarray

    def __post_init__(self):
        shape = np.shape(self.values)
        if len(shape) != 2 or shape[0] != shape[1]:
            raise ShapeError("PromptMatrix", shape)


def hop_nodes(graph: Graph, v: int, delta: int) -> np.ndarray:
    """Sorted indices of nodes within ``delta`` hops of ``v`` (breadth-first)."""
    if not 0 <= v < graph.num_nodes:
        raise IndexError(f"node {v} out of range for {graph.num_nodes} nodes")
    if delta < 0:
        raise ContractError("delta must be >= 0")
    dist = {v: 0}
    frontier = deque([v])
    while frontier:
        u = frontier.popleft()
        if dist[u] == delta:
            continue
        for w in graph.neighbors(u).tolist():
            if w not in dist:
                dist[w] = dist[u] + 1
                frontier.append(w)
    return np.array(sorted(dist), dtype=np.int64)


def extract_subgraph(graph: Graph, v: int, delta: int = 1) -> Subgraph:
    nodes = hop_nodes(graph, v, delta)
    inside = np.zeros(graph.num_nodes, dtype=bool)
    inside[nodes] = True
    e = graph.undirected_edges()
    e = e[inside[e[:, 0]] & inside[e[:, 1]]]
    return Subgraph(graph, nodes, e)


@dataclass(frozen=True, eq=False)
class ContextIndex:
    """Contextual-subgraph node lists for every node of one graph, in CSR form."""

    offsets: np.ndarray
    members: np.ndarray

    def nodes_of(self, v: int) -> np.ndarray:
        return self.members[self.offsets[v]:self.offsets[v + 1]]

    def gather(self, anchors) -> tuple[np.ndarray, np.ndarray]:
        """Concatenated member nodes of ``anchors`` and the owning anchor position."""
        anchors = np.asarray(anchors, dtype=np.int64)
        lens = self.offsets[anchors + 1] - self.offsets[anchors]
        seg = np.repeat(np.arange(anchors.shape[0], dtype=np.int64), lens)
        starts = np.repeat(self.offsets[anchors], lens)
        within = np.arange(seg.shape[0], dtype=np.int64) - np.repeat(np.cumsum(lens) - lens, lens)
        return self.members[starts + within], seg


def context_index(graph: Graph, delta: int) -> ContextIndex:
    if delta == 0:
        n = graph.num_nodes
        return ContextIndex(np.arange(n + 1, dtype=np.int64), np.arange(n, dtype=np.int64))
    if delta == 1:
        # closed neighbourhood: merge v into its sorted neighbour row
        lens = graph.degrees() + 1
        offsets = np.zeros(graph.num_nodes + 1, dtype=np.int64)
        np.cumsum(lens, out=offsets[1:])
        members = np.concatenate(
            [np.sort(np.append(graph.neighbors(v), v)) for v in range(graph.num_nodes)]
        ) if graph.num_nodes else np.zeros(0, np.int64)
        return ContextIndex(offsets, members.astype(np.int64))
    rows = [hop_nodes(graph, v, delta) for v in range(graph.num_nodes)]
    offsets = np.zeros(graph.num_nodes + 1, dtype=np.int64)
    np.cumsum([r.shape[0] for r in rows], out=offsets[1:])
    return ContextIndex(offsets, np.concatenate(rows) if rows else np.zeros(0, np.int64))


# ---------------------------------------------------------------------------
# ReadOut on plain arrays
# ---------------------------------------------------------------------------

def _nodes(subgraph) -> np.ndarray:
    nodes = subgraph.nodes if isinstance(subgraph, Subgraph) else np.asarray(subgraph, dtype=np.int64)
    if nodes.shape[0] == 0:
        raise ContractError("readout of an empty subgraph")
    return np.sort(nodes)


def _sum_rows(rows: np.ndarray) -> np.ndarray:
    return rows.astype(np.float64).sum(axis=0).astype(rows.dtype)


def readout(embeddings: np.ndarray, subgraph) -> np.ndarray:
    """Sum pooling over the subgraph's nodes."""
    return _sum_rows(embeddings[_nodes(subgraph)])


def prompted_readout(embeddings: np.ndarray, subgraph, prompt) -> np.ndarray:
    """Sum over nodes of ``prompt * h_v`` (feature-weighted summation)."""
    p = prompt.values if isinstance(prompt, PromptVector) else np.asarray(prompt)
    if p.shape != (embeddings.shape[1],):
        raise ShapeError("prompted_readout", p.shape, (embeddings.shape[1],))
    return _sum_rows(embeddings[_nodes(subgraph)] * p.astype(embeddings.dtype))


def linear_prompted_readout(embeddings: np.ndarray, subgraph, prompt) -> np.ndarray:
    """Sum over nodes of ``P @ h_v``."""
    P = prompt.values if isinstance(prompt, PromptMatrix) else np.asarray(prompt)
    d = embeddings.shape[1]
    if P.shape != (d, d):
        raise ShapeError("linear_prompted_readout", P.shape, (d, d))
    return _sum_rows(embeddings[_nodes(subgraph)] @ P.astype(embeddings.dtype).T)


def cosine_similarity(x, y) -> float:
    """Cosine similarity with norms clamped at 1e-12; zero vectors give 0."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx = max(np.linalg.norm(x), COSINE_EPS)
    ny = max(np.linalg.norm(y), COSINE_EPS)
    return float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0))


# ---------------------------------------------------------------------------
# differentiable counterparts
# ---------------------------------------------------------------------------

def readout_tensor(embeddings: Tensor, members: np.ndarray, segments: np.ndarray, count: int) -> Tensor:
    """Sum pooling for ``count`` subgraphs given flattened membership arrays."""
    return ad.segment_sum(ad.gather(embeddings, members), segments, count)


def cosine_rows(x: Tensor, y: Tensor) -> Tensor:
    """Row-wise cosine similarity of two ``(n, d)`` tensors, shape ``(n,)``."""
    return ad.clip(ad.sum(ad.mul(ad.l2_normalize(x), ad.l2_normalize(y)), axis=1), -1.0, 1.0)


def cosine_matrix(x: Tensor, y: Tensor) -> Tensor:
    """All-pairs cosine similarity, shape ``(n, m)``."""
    return ad.clip(ad.matmul(ad.l2_normalize(x), ad.transpose(ad.l2_normalize(y))), -1.0, 1.0)
