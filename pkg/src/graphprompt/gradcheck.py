"""Finite-difference checks of the two training losses on small random fixtures.

Each fixture is a handful of graphs with at most 8 nodes, 4 input features and
a 2-layer encoder, evaluated in float64. ``run_suites`` is what the
``gradcheck`` command executes.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .autodiff import gradient_check
from .encoder import EncoderConfig, init_params
from .graph import Graph, GraphCollection, SyntheticSpec, generate_synthetic
from .pretrain import PretrainConfig, _sample_epoch, _TripletBatcher, usable_graphs
from .sampling import NODE, FewShotTask
from .tuning import LINEAR_PROMPT, PROMPT, EmbeddingCache, prompt_loss

TOLERANCE = 1e-4
MODULES = ("all", "pretrain", "prompt")


@dataclass(frozen=True)
class SuiteResult:
    name: str
    max_relative_error: float
    checked: int
    excluded: int

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_relative_error < TOLERANCE


def small_collection(seed: int, num_graphs: int = 3, feature_dim: int = 4) -> GraphCollection:
    """Planted-partition topology with standard-normal features.

    Unshifted features keep first-layer relus active on every graph, so
    embeddings (and gradients) are not degenerate.
    """
    spec = SyntheticSpec(num_graphs=num_graphs, nodes_per_graph=(5, 8), edge_prob=0.45,
                         feature_dim=feature_dim, node_class_count=2)
    base = generate_synthetic(spec, seed, name=f"gradcheck{seed}")
    rng = np.random.default_rng([seed, 1])
    graphs = tuple(
        Graph.from_edges(g.num_nodes, g.undirected_edges(), features=rng.standard_normal((g.num_nodes, feature_dim)),
                         node_labels=g.node_labels, graph_label=g.graph_label)
        for g in base
    )
    return dataclasses.replace(base, graphs=graphs)


def small_encoder(feature_dim: int = 4) -> EncoderConfig:
    return EncoderConfig(input_dim=feature_dim, num_layers=2, hidden_dim=4)


def random_weights(enc: EncoderConfig, seed: int) -> dict:
    """Glorot weights plus small random biases, so no relu layer is dead."""
    params = init_params(enc, seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    return {k: v + (rng.normal(0, 0.1, v.shape) if k.endswith(("b1", "b2")) else 0.0)
            for k, v in params.arrays.items()}


def pretrain_case(seed: int, tau: float = 0.7, negatives: int = 2) -> SuiteResult:
    """Gradient of the link-prediction loss w.r.t. every encoder weight."""
    coll = small_collection(seed)
    cfg = PretrainConfig(tau=tau, triplets_per_graph=3, negatives=negatives, seed=seed)
    rows = _sample_epoch(coll, usable_graphs(coll), cfg, 1)
    enc = small_encoder()
    arrays = random_weights(enc, seed)
    batcher = _TripletBatcher(coll, cfg.delta)
    res = gradient_check(lambda w: batcher.loss(rows, w, enc, tau), arrays)
    return SuiteResult(f"pretrain[seed={seed}]", res.max_relative_error, res.checked, res.excluded)


def _node_task(coll: GraphCollection, rng, k: int = 2) -> FewShotTask:
    refs = [((gi, v), int(g.node_labels[v])) for gi, g in enumerate(coll) for v in range(g.num_nodes)]
    classes = sorted({c for _, c in refs})
    support = []
    for c in classes:
        mine = [r for r in refs if r[1] == c]
        pick = rng.choice(len(mine), size=min(k, len(mine)), replace=False)
        support.extend(mine[i] for i in sorted(pick))
    return FewShotTask(NODE, k, tuple(classes), tuple(support))


def prompt_case(seed: int, variant: str, tau: float = 0.5) -> SuiteResult:
    """Gradient of the prompt-tuning loss w.r.t. the head, encoder frozen."""
    coll = small_collection(seed)
    enc = small_encoder()
    params = init_params(enc, seed, dtype=np.float64).replace(random_weights(enc, seed))
    cache = EmbeddingCache(coll, params, delta=1)
    rng = np.random.default_rng(seed)
    task = _node_task(coll, rng)
    d = enc.emb_dim
    if variant == PROMPT:
        head = {"p": rng.uniform(0.5, 1.5, d)}
    else:
        head = {"P": np.eye(d) + rng.normal(0, 0.2, (d, d))}
    res = gradient_check(lambda h: prompt_loss(cache, task, h, tau, variant=variant), head)
    return SuiteResult(f"{variant}[seed={seed}]", res.max_relative_error, res.checked, res.excluded)


def run_suites(module: str = "all", seeds=(0, 1, 2)) -> list[SuiteResult]:
    if module not in MODULES:
        raise ValueError(f"module must be one of {MODULES}")
    out = []
    if module in ("all", "pretrain"):
        out.extend(pretrain_case(s) for s in seeds)
    if module in ("all", "prompt"):
        for variant in (PROMPT, LINEAR_PROMPT):
            out.extend(prompt_case(s, variant) for s in seeds)
    return out
