"""GIN message-passing encoder.

Layer ``l`` computes ``MLP_l((1 + eps) * h_v + sum_{u in N(v)} h_u)`` where the
perceptron is ``Linear -> relu -> Linear``. A relu follows every layer except
the last, so the final embeddings keep their sign.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionMismatchError
from .graph import Graph

EMBEDDING_MODES = ("last", "concat")
PARAM_NAMES = ("W1", "b1", "W2", "b2")


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    num_layers: int = 3
    hidden_dim: int = 32
    embedding_mode: str = "concat"
    epsilon: float = 0.0

    def __post_init__(self):
        if self.num_layers < 1:
            raise ContractError("num_layers must be >= 1")
        if self.input_dim < 1 or self.hidden_dim < 1:
            raise ContractError("dimensions must be >= 1")
        if self.embedding_mode not in EMBEDDING_MODES:
            raise ContractError(f"embedding_mode must be one of {EMBEDDING_MODES}")

    @property
    def emb_dim(self) -> int:
        if self.embedding_mode == "concat":
            return self.num_layers * self.hidden_dim
        return self.hidden_dim

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "num_layers": self.num_layers,
            "hidden_dim": self.hidden_dim,
            "embedding_mode": self.embedding_mode,
            "epsilon": self.epsilon,
        }


@dataclass(frozen=True, eq=False)
class EncoderParams:
    """Per-layer perceptron weights plus the architecture they belong to."""

    config: EncoderConfig
    arrays: dict  # "layer{l}.{W1,b1,W2,b2}" -> ndarray

    def names(self) -> list[str]:
        return [f"layer{l}.{p}" for l in range(self.config.num_layers) for p in PARAM_NAMES]

    def tensors(self, requires_grad: bool = False, dtype=None) -> dict[str, Tensor]:
        return {
            k: Tensor(self.arrays[k].astype(dtype or self.arrays[k].dtype, copy=True), requires_grad=requires_grad)
            for k in self.names()
        }

    def replace(self, arrays: dict) -> "EncoderParams":
        return EncoderParams(self.config, {k: np.array(arrays[k], dtype=self.arrays[k].dtype) for k in self.names()})

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in self.names():
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.arrays[k]).tobytes())
        return h.hexdigest()

    @property
    def dtype(self):
        return self.arrays["layer0.W1"].dtype


def layer_shapes(config: EncoderConfig) -> list[dict[str, tuple[int, ...]]]:
    h = config.hidden_dim
    out = []
    for l in range(config.num_layers):
        fan_in = config.input_dim if l == 0 else h
        out.append({"W1": (fan_in, h), "b1": (h,), "W2": (h, h), "b2": (h,)})
    return out


def init_params(config: EncoderConfig, seed, dtype=np.float32) -> EncoderParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for l, shapes in enumerate(layer_shapes(config)):
        for name in PARAM_NAMES:
            shape = shapes[name]
            if name.startswith("W"):
                bound = np.sqrt(6.0 / (shape[0] + shape[1]))
                arrays[f"layer{l}.{name}"] = rng.uniform(-bound, bound, size=shape).astype(dtype)
            else:
                arrays[f"layer{l}.{name}"] = np.zeros(shape, dtype=dtype)
    return EncoderParams(config, arrays)


def count_params(params: EncoderParams) -> int:
    return int(np.sum([params.arrays[k].size for k in params.names()]))


def closed_form_param_count(config: EncoderConfig) -> int:
    h, d = config.hidden_dim, config.input_dim
    first = d * h + h + h * h + h
    return first + (config.num_layers - 1) * 2 * (h * h + h)


@dataclass(frozen=True, eq=False)
class GraphBatch:
    """Disjoint union of graphs, ready for batched message passing."""

    features: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    num_nodes: int
    node_offsets: np.ndarray  # start row of each member graph, plus total

    @classmethod
    def from_graphs(cls, graphs: Sequence[Graph]) -> "GraphBatch":
        sizes = np.array([g.num_nodes for g in graphs], dtype=np.int64)
        offsets = np.zeros(len(graphs) + 1, dtype=np.int64)
        np.cumsum(sizes, out=offsets[1:])
        srcs, dsts = [], []
        for g, off in zip(graphs, offsets[:-1]):
            s, d = g.half_edges()
            srcs.append(s + off)
            dsts.append(d + off)
        feats = np.concatenate([g.features for g in graphs], axis=0) if graphs else np.zeros((0, 1))
        empty = np.zeros(0, dtype=np.int64)
        return cls(
            features=feats,
            src=np.concatenate(srcs) if srcs else empty,
            dst=np.concatenate(dsts) if dsts else empty,
            num_nodes=int(offsets[-1]),
            node_offsets=offsets,
        )


def encode_tensor(batch: GraphBatch, weights: dict[str, Tensor], config: EncoderConfig) -> Tensor:
    """Differentiable forward pass over a :class:`GraphBatch`."""
    if batch.features.shape[1] != config.input_dim:
        raise DimensionMismatchError(
            f"graph feature_dim {batch.features.shape[1]} != encoder input_dim {config.input_dim}"
        )
    dtype = weights["layer0.W1"].dtype
    h = Tensor(batch.features.astype(dtype, copy=False))
    outputs = []
    for l in range(config.num_layers):
        # adjacency is symmetric, so summing h[dst] into src (sorted) equals the neighbour sum
        agg = ad.segment_sum(ad.gather(h, batch.dst), batch.src, batch.num_nodes)
        self_term = h if config.epsilon == 0 else ad.scale(h, 1.0 + config.epsilon)
        z = ad.add(self_term, agg)
        hidden = ad.relu(ad.add(ad.matmul(z, weights[f"layer{l}.W1"]), weights[f"layer{l}.b1"]))
        h = ad.add(ad.matmul(hidden, weights[f"layer{l}.W2"]), weights[f"layer{l}.b2"])
        if l < config.num_layers - 1:
            h = ad.relu(h)
        outputs.append(h)
    if config.embedding_mode == "concat":
        return ad.concat(outputs, axis=1)
    return outputs[-1]


def encode_batch(batch: GraphBatch, params: EncoderParams) -> np.ndarray:
    return encode_tensor(batch, params.tensors(), params.config).data


def encode(graph: Graph, params: EncoderParams) -> np.ndarray:
    """Node embeddings of one graph, shape ``(num_nodes, emb_dim)``."""
    return encode_batch(GraphBatch.from_graphs([graph]), params)
