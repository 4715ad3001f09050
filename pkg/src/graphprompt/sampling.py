"""Link-triplet sampling for pre-training and k-shot task construction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import SamplingError, TaskConstructionError
from .graph import Graph, GraphCollection

NODE = "node"
GRAPH = "graph"

# protocol: node-level tasks only live in graphs with more than this many nodes
MIN_NODE_TASK_GRAPH_SIZE = 50


class LinkTriplet(NamedTuple):
    v: int
    a: int
    b: int


def _check_triplet_node(graph: Graph, v: int) -> None:
    deg = int(graph.csr_offsets[v + 1] - graph.csr_offsets[v])
    if deg == 0:
        raise SamplingError(f"node {v} has no neighbours, no positive sample exists")
    if deg >= graph.num_nodes - 1:
        raise SamplingError(f"node {v} is adjacent to every other node, no negative sample exists")


def sample_triplet_for(graph: Graph, v: int, rng: np.random.Generator) -> LinkTriplet:
    """Draw one ``(v, a, b)`` triplet anchored at a fixed node ``v``."""
    _check_triplet_node(graph, v)
    nb = graph.neighbors(v)
    a = int(nb[rng.integers(nb.shape[0])])
    excluded = np.union1d(nb, [v])
    candidates = np.setdiff1d(np.arange(graph.num_nodes), excluded, assume_unique=True)
    b = int(candidates[rng.integers(candidates.shape[0])])
    return LinkTriplet(int(v), a, b)


def triplet_anchors(graph: Graph) -> np.ndarray:
    """Nodes that admit at least one positive and one negative sample."""
    deg = graph.degrees()
    return np.flatnonzero((deg >= 1) & (deg < graph.num_nodes - 1))


def sample_link_triplets(graph: Graph, count: int, seed) -> list[LinkTriplet]:
    """Sample ``count`` triplets: anchor ``v``, neighbour ``a``, non-neighbour ``b``.

    Anchors are uniform over nodes that have both a neighbour and a
    non-neighbour; ``a`` is uniform over N(v) and ``b`` uniform over
    V minus ({v} and N(v)).
    """
    arr = sample_link_triplet_array(graph, count, np.random.default_rng(seed))
    return [LinkTriplet(*map(int, row)) for row in arr]


def sample_link_triplet_array(graph: Graph, count: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorised sampler returning an ``(count, 3)`` int array."""
    if graph.num_edges == 0:
        raise SamplingError("graph has no edges")
    anchors = triplet_anchors(graph)
    if anchors.size == 0:
        raise SamplingError("graph is complete, no negative sample exists for any node")
    n = graph.num_nodes
    offsets, targets = graph.csr_offsets, graph.csr_targets
    deg = np.diff(offsets)
    v = anchors[rng.integers(anchors.shape[0], size=count)]
    a = targets[offsets[v] + rng.integers(0, deg[v])]
    # rejection sampling is exact for the uniform law over valid negatives
    b = rng.integers(0, n, size=count)
    bad = _invalid_negative(graph, v, b)
    rounds = 0
    while bad.any() and rounds < 64:
        idx = np.flatnonzero(bad)
        b[idx] = rng.integers(0, n, size=idx.shape[0])
        bad[idx] = _invalid_negative(graph, v[idx], b[idx])
        rounds += 1
    for i in np.flatnonzero(bad):
        b[i] = sample_triplet_for(graph, int(v[i]), rng).b
    return np.stack([v, a, b], axis=1).astype(np.int64)


def _invalid_negative(graph: Graph, v: np.ndarray, b: np.ndarray) -> np.ndarray:
    bad = v == b
    offsets, targets = graph.csr_offsets, graph.csr_targets
    for i in np.flatnonzero(~bad):
        row = targets[offsets[v[i]]:offsets[v[i] + 1]]
        j = np.searchsorted(row, b[i])
        bad[i] = j < row.shape[0] and row[j] == b[i]
    return bad


# ---------------------------------------------------------------------------
# k-shot tasks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FewShotTask:
    """A k-shot episode.

    Instance references are ``(graph_index, node_index)`` tuples at node level
    and plain graph indices at graph level.
    """

    level: str
    k: int
    classes: tuple[int, ...]
    support: tuple[tuple[object, int], ...]
    query: tuple[tuple[object, int], ...] = ()

    def support_by_class(self) -> dict[int, list]:
        out = {c: [] for c in self.classes}
        for ref, c in self.support:
            out[c].append(ref)
        return out


class TaskTriple(NamedTuple):
    train: FewShotTask
    val: FewShotTask
    test_query: tuple[tuple[object, int], ...]


def _node_instances(graph: Graph, gi: int, classes) -> dict[int, list]:
    by_class = {c: [] for c in classes}
    if graph.node_labels is None:
        return by_class
    for v, c in enumerate(graph.node_labels.tolist()):
        if c in by_class:
            by_class[c].append((gi, v))
    return by_class


def _graph_instances(collection: GraphCollection, classes) -> dict[int, list]:
    by_class = {c: [] for c in classes}
    for gi, g in enumerate(collection):
        if g.graph_label in by_class:
            by_class[g.graph_label].append(gi)
    return by_class


def _shortfall(by_class: dict[int, list], need: int) -> int | None:
    for c, inst in by_class.items():
        if len(inst) < need:
            return c
    return None


def eligible_node_task_graphs(
    collection: GraphCollection, k: int, classes: Sequence[int],
    min_graph_nodes: int = MIN_NODE_TASK_GRAPH_SIZE,
) -> list[int]:
    out = []
    for gi, g in enumerate(collection):
        if g.num_nodes <= min_graph_nodes or g.node_labels is None:
            continue
        if _shortfall(_node_instances(g, gi, classes), 2 * k) is None:
            out.append(gi)
    return out


def sample_kshot_task(
    collection: GraphCollection,
    level: str,
    k: int,
    class_subset: Sequence[int] | None = None,
    seed=0,
    graph_index: int | None = None,
    min_graph_nodes: int = MIN_NODE_TASK_GRAPH_SIZE,
) -> TaskTriple:
    """Build a paired train/validation k-shot task plus the test query set.

    Both supports hold exactly ``k`` instances per class and are disjoint;
    every remaining labelled instance of the task classes goes to the test
    query. Node-level tasks live inside one graph with more than
    ``min_graph_nodes`` nodes, picked at random unless ``graph_index`` is set.
    """
    if k < 1:
        raise TaskConstructionError("k must be >= 1")
    rng = np.random.default_rng(seed)
    if level == NODE:
        n_cls = collection.node_class_count
        if n_cls is None:
            raise TaskConstructionError(f"{collection.name} has no node labels")
        classes = tuple(sorted(class_subset)) if class_subset is not None else tuple(range(n_cls))
        if graph_index is None:
            eligible = eligible_node_task_graphs(collection, k, classes, min_graph_nodes)
            if not eligible:
                worst = _worst_node_class(collection, classes, min_graph_nodes)
                raise TaskConstructionError(
                    f"no graph with more than {min_graph_nodes} nodes has {2 * k} labelled "
                    f"nodes of class {worst}"
                )
            graph_index = int(eligible[rng.integers(len(eligible))])
        g = collection[graph_index]
        if g.num_nodes <= min_graph_nodes:
            raise TaskConstructionError(
                f"graph {graph_index} has {g.num_nodes} nodes; node tasks need more than {min_graph_nodes}"
            )
        by_class = _node_instances(g, graph_index, classes)
    elif level == GRAPH:
        n_cls = collection.graph_class_count
        if n_cls is None:
            raise TaskConstructionError(f"{collection.name} has no graph labels")
        classes = tuple(sorted(class_subset)) if class_subset is not None else tuple(range(n_cls))
        by_class = _graph_instances(collection, classes)
    else:
        raise TaskConstructionError(f"unknown task level {level!r}")

    short = _shortfall(by_class, 2 * k)
    if short is not None:
        raise TaskConstructionError(
            f"class {short} has {len(by_class[short])} instances; {2 * k} needed for k={k}"
        )

    train, val, used = [], [], set()
    for c in classes:
        inst = by_class[c]
        pick = rng.choice(len(inst), size=2 * k, replace=False)
        train.extend((inst[i], c) for i in pick[:k])
        val.extend((inst[i], c) for i in pick[k:])
        used.update(inst[i] for i in pick)
    test = tuple((ref, c) for c in classes for ref in by_class[c] if ref not in used)
    test = tuple(sorted(test, key=lambda rc: rc[0]))
    return TaskTriple(
        FewShotTask(level, k, classes, tuple(train), test),
        FewShotTask(level, k, classes, tuple(val), test),
        test,
    )


def _worst_node_class(collection, classes, min_graph_nodes):
    best = {c: 0 for c in classes}
    for gi, g in enumerate(collection):
        if g.num_nodes <= min_graph_nodes:
            continue
        for c, inst in _node_instances(g, gi, classes).items():
            best[c] = max(best[c], len(inst))
    return min(best, key=best.get)
