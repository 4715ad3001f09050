"""Link-prediction pre-training of the encoder under the subgraph-similarity template."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import EncoderConfig, EncoderParams, GraphBatch, encode_tensor, init_params
from .errors import CheckpointError, ContractError, PretrainingError, SamplingError
from .graph import GraphCollection
from .optim import Adam
from .readout import ContextIndex, context_index, cosine_rows, readout_tensor
from .sampling import sample_link_triplet_array, sample_triplet_for
from .seeding import derive_seed
from .serialize import decode_array, encode_array, read_document, write_document

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    tau: float = 1.0
    triplets_per_graph: int = 100
    batch_size: int = 128
    learning_rate: float = 1e-3
    max_epochs: int = 200
    patience: int = 20
    delta: int = 1
    negatives: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0 or self.learning_rate <= 0:
            raise ContractError("tau and learning_rate must be positive")
        if min(self.triplets_per_graph, self.batch_size, self.patience, self.negatives) < 1:
            raise ContractError("counts must be positive")
        if self.max_epochs < 0 or self.delta < 0:
            raise ContractError("max_epochs and delta must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class Checkpoint:
    params: EncoderParams
    pretrain_config: PretrainConfig
    initial_loss: float
    final_loss: float
    best_loss: float
    best_epoch: int
    history: list[float] = field(default_factory=list)
    dataset: str = ""

    @property
    def encoder_config(self) -> EncoderConfig:
        return self.params.config

    @property
    def seed(self) -> int:
        return self.pretrain_config.seed


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def pretrain_loss(s_v: Tensor, s_a: Tensor, s_neg, tau: float) -> Tensor:
    """Summed contrastive link-prediction loss over a batch of triplets.

    ``s_v``, ``s_a`` and each negative in ``s_neg`` are ``(n, d)`` subgraph
    embeddings aligned row by row. Per triplet the loss is
    ``-ln(exp(sim(v,a)/tau) / sum_u exp(sim(v,u)/tau))`` with u ranging over
    the positive and the negatives.
    """
    if s_v.shape[0] == 0:
        raise ContractError("pretrain_loss needs at least one triplet")
    negs = [s_neg] if isinstance(s_neg, Tensor) else list(s_neg)
    pos = ad.div_scalar(cosine_rows(s_v, s_a), tau)
    denom = ad.exp(pos)
    for s_b in negs:
        denom = ad.add(denom, ad.exp(ad.div_scalar(cosine_rows(s_v, s_b), tau)))
    return ad.sum(ad.sub(ad.log(denom), pos))


def triplet_loss_value(sim_pos: float, sim_neg, tau: float) -> float:
    """Scalar reference: loss of one triplet from its similarities."""
    negs = np.atleast_1d(np.asarray(sim_neg, dtype=np.float64))
    logits = np.concatenate([[sim_pos], negs]) / tau
    return float(np.log(np.exp(logits).sum()) - logits[0])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _ranges(starts: np.ndarray, lens: np.ndarray) -> np.ndarray:
    """Concatenation of ``arange(s, s + l)`` for every pair."""
    total = int(lens.sum())
    shift = np.repeat(starts - (np.cumsum(lens) - lens), lens)
    return shift + np.arange(total, dtype=np.int64)


class _TripletBatcher:
    """Turns (graph, v, a, b...) rows into encoder batches and readout indices.

    The whole collection is flattened once into global node ids, so a batch is
    cut out with array indexing instead of per-graph loops.
    """

    def __init__(self, collection: GraphCollection, delta: int):
        self.collection = collection
        self.delta = delta
        sizes = np.array([g.num_nodes for g in collection], dtype=np.int64)
        self.node_start = np.concatenate([[0], np.cumsum(sizes)])
        self.sizes = sizes
        total = int(self.node_start[-1])
        self.features = np.concatenate([g.features for g in collection], axis=0)
        deg = np.concatenate([g.degrees() for g in collection]).astype(np.int64)
        self.adj_offsets = np.concatenate([[0], np.cumsum(deg)])
        self.adj_targets = np.concatenate(
            [g.csr_targets.astype(np.int64) + s for g, s in zip(collection, self.node_start[:-1])]
        )
        ctx_len, ctx_members = [], []
        for g, s in zip(collection, self.node_start[:-1]):
            c = context_index(g, delta)
            ctx_len.append(np.diff(c.offsets))
            ctx_members.append(c.members + s)
        ctx_offsets = np.concatenate([[0], np.cumsum(np.concatenate(ctx_len))]).astype(np.int64)
        self.ctx = ContextIndex(ctx_offsets, np.concatenate(ctx_members))
        self._local = np.full(total, -1, dtype=np.int64)

    def batch(self, gids: np.ndarray) -> tuple[GraphBatch, np.ndarray]:
        """Disjoint union of graphs ``gids`` and the global ids of its rows."""
        nodes = _ranges(self.node_start[gids], self.sizes[gids])
        local = self._local
        local[nodes] = np.arange(nodes.shape[0])
        deg = self.adj_offsets[nodes + 1] - self.adj_offsets[nodes]
        src = np.repeat(np.arange(nodes.shape[0], dtype=np.int64), deg)
        dst = local[self.adj_targets[_ranges(self.adj_offsets[nodes], deg)]]
        offsets = np.concatenate([[0], np.cumsum(self.sizes[gids])])
        return GraphBatch(self.features[nodes], src, dst, int(nodes.shape[0]), offsets), nodes

    def loss(self, rows: np.ndarray, weights: dict, config: EncoderConfig, tau: float) -> Tensor:
        gids = np.unique(rows[:, 0])
        batch, _ = self.batch(gids)
        H = encode_tensor(batch, weights, config)
        n, roles = rows.shape[0], rows.shape[1] - 1
        # role-major anchor order: all v, then all a, then each negative column
        anchors = (rows[:, 1:] + self.node_start[rows[:, :1]]).T.reshape(-1)
        members, seg = self.ctx.gather(anchors)
        S = readout_tensor(H, self._local[members], seg, roles * n)
        parts = [ad.gather(S, np.arange(r * n, (r + 1) * n)) for r in range(roles)]
        return pretrain_loss(parts[0], parts[1], parts[2:], tau)


def _sample_epoch(collection, usable, config: PretrainConfig, epoch: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(config.seed, "triplets", epoch))
    blocks = []
    for gi in usable:
        arr = sample_link_triplet_array(collection[gi], config.triplets_per_graph, rng)
        extra = [_renegative(collection[gi], arr[:, 0], rng) for _ in range(config.negatives - 1)]
        blocks.append(np.column_stack([np.full(arr.shape[0], gi), arr, *extra]))
    return np.concatenate(blocks, axis=0)


def _renegative(graph, anchors, rng) -> np.ndarray:
    return np.array([sample_triplet_for(graph, int(v), rng).b for v in anchors], dtype=np.int64)


def usable_graphs(collection: GraphCollection) -> list[int]:
    out = []
    for gi, g in enumerate(collection):
        deg = g.degrees()
        if g.num_edges and np.any((deg >= 1) & (deg < g.num_nodes - 1)):
            out.append(gi)
    return out


def evaluate_pretrain_loss(collection, params: EncoderParams, rows: np.ndarray, config: PretrainConfig) -> float:
    batcher = _TripletBatcher(collection, config.delta)
    weights = params.tensors()
    total = 0.0
    for start in range(0, rows.shape[0], 1024):
        total += float(batcher.loss(rows[start:start + 1024], weights, params.config, config.tau).data)
    return total / rows.shape[0]


def run_pretraining(
    collection: GraphCollection,
    config: PretrainConfig,
    encoder_config: EncoderConfig | None = None,
) -> Checkpoint:
    """Minimise the link-prediction loss with Adam in shuffled mini-batches.

    Triplets are resampled every epoch from a seed derived from
    ``config.seed``. Training stops after ``patience`` epochs without a new
    best epoch loss; the best parameters seen (the initial ones included) are
    returned.
    """
    if len(collection) == 0:
        raise PretrainingError("empty collection")
    enc_cfg = encoder_config or EncoderConfig(input_dim=collection.feature_dim)
    if enc_cfg.input_dim != collection.feature_dim:
        raise PretrainingError(
            f"encoder input_dim {enc_cfg.input_dim} != dataset feature_dim {collection.feature_dim}"
        )
    usable = usable_graphs(collection)
    if not usable:
        raise PretrainingError(f"no graph in {collection.name} admits a valid link triplet")

    params = init_params(enc_cfg, derive_seed(config.seed, "init"))
    arrays = {k: v.copy() for k, v in params.arrays.items()}
    batcher = _TripletBatcher(collection, config.delta)

    try:
        first = _sample_epoch(collection, usable, config, 1)
    except SamplingError as exc:
        raise PretrainingError(str(exc)) from exc
    initial = evaluate_pretrain_loss(collection, params, first, config)
    log.info("epoch=0 loss=%.6f", initial)

    best_loss, best_epoch, best_arrays = initial, 0, {k: v.copy() for k, v in arrays.items()}
    history: list[float] = []
    opt = Adam(arrays, lr=config.learning_rate)
    shuffle_rng = np.random.default_rng(derive_seed(config.seed, "shuffle"))
    stall = 0
    for epoch in range(1, config.max_epochs + 1):
        rows = first if epoch == 1 else _sample_epoch(collection, usable, config, epoch)
        rows = rows[shuffle_rng.permutation(rows.shape[0])]
        total = 0.0
        for start in range(0, rows.shape[0], config.batch_size):
            chunk = rows[start:start + config.batch_size]
            weights = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
            loss = batcher.loss(chunk, weights, enc_cfg, config.tau)
            total += float(loss.data)
            grads = ad.backward(ad.div_scalar(loss, chunk.shape[0]), weights)
            opt.step(grads)
        epoch_loss = total / rows.shape[0]
        if not math.isfinite(epoch_loss):
            raise PretrainingError(f"loss diverged at epoch {epoch}")
        history.append(epoch_loss)
        log.info("epoch=%d loss=%.6f", epoch, epoch_loss)
        if epoch_loss < best_loss:
            best_loss, best_epoch, stall = epoch_loss, epoch, 0
            best_arrays = {k: v.copy() for k, v in arrays.items()}
        else:
            stall += 1
            if stall >= config.patience:
                break

    return Checkpoint(
        params=params.replace(best_arrays),
        pretrain_config=config,
        initial_loss=initial,
        final_loss=history[-1] if history else initial,
        best_loss=best_loss,
        best_epoch=best_epoch,
        history=history,
        dataset=collection.name,
    )


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_checkpoint(ckpt: Checkpoint, path, run_config: dict | None = None):
    """Write ``ckpt``; ``run_config`` is stored alongside as a snapshot."""
    body = {
        "dataset": ckpt.dataset,
        "encoder_config": ckpt.encoder_config.to_dict(),
        "pretrain_config": ckpt.pretrain_config.to_dict(),
        "seed": ckpt.seed,
        "initial_loss": ckpt.initial_loss,
        "final_loss": ckpt.final_loss,
        "best_loss": ckpt.best_loss,
        "best_epoch": ckpt.best_epoch,
        "history": list(ckpt.history),
        "params": {k: encode_array(ckpt.params.arrays[k]) for k in ckpt.params.names()},
    }
    if run_config is not None:
        body["run_config"] = run_config
    return write_document(path, "checkpoint", body)


def _build(cls, d: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise CheckpointError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**d)


def load_checkpoint(path) -> Checkpoint:
    doc = read_document(path, "checkpoint")
    try:
        enc = _build(EncoderConfig, doc["encoder_config"])
        pre = _build(PretrainConfig, doc["pretrain_config"])
        arrays = {k: decode_array(v) for k, v in doc["params"].items()}
        params = EncoderParams(enc, arrays)
        missing = set(params.names()) - set(arrays)
        if missing:
            raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
        return Checkpoint(
            params=params,
            pretrain_config=pre,
            initial_loss=float(doc["initial_loss"]),
            final_loss=float(doc["final_loss"]),
            best_loss=float(doc["best_loss"]),
            best_epoch=int(doc["best_epoch"]),
            history=[float(x) for x in doc["history"]],
            dataset=doc.get("dataset", ""),
        )
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing field {exc}") from None
