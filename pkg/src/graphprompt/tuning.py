"""Frozen-encoder prompt tuning, prototype prediction and the ablation heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import EncoderParams, GraphBatch, encode_batch
from .errors import ContractError, DimensionMismatchError
from .graph import GraphCollection
from .optim import Adam
from .readout import ContextIndex, context_index, cosine_matrix
from .sampling import GRAPH, NODE, FewShotTask
from .seeding import derive_seed
from .serialize import decode_array, encode_array, read_document, write_document

PROMPT = "prompt"
LINEAR_PROMPT = "linear_prompt"
NO_PROMPT = "no_prompt"
VARIANTS = (PROMPT, LINEAR_PROMPT, NO_PROMPT)
WARM_CHUNK = 64


@dataclass(frozen=True)
class TuneConfig:
    tau: float = 1.0
    learning_rate: float = 1e-2
    max_epochs: int = 200
    patience: int = 20
    variant: str = PROMPT
    delta: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.tau <= 0 or self.learning_rate <= 0 or self.patience < 1:
            raise ContractError("tau, learning_rate and patience must be positive")
        if self.max_epochs < 0 or self.delta < 0:
            raise ContractError("max_epochs and delta must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class TunedHead:
    """Tunable downstream parameters of one task.

    ``values`` maps ``"p"`` (prompt), ``"P"`` (linear prompt) or ``"W"``/``"b"``
    (no-prompt classifier) to arrays. ``classes`` fixes the classifier's
    column order.
    """

    variant: str
    values: dict
    classes: tuple[int, ...]
    best_epoch: int = 0
    epochs_run: int = 0
    history: list = field(default_factory=list)

    @property
    def emb_dim(self) -> int:
        v = self.values
        return int(v["p"].shape[0] if "p" in v else v["P"].shape[0] if "P" in v else v["W"].shape[0])

    @property
    def num_params(self) -> int:
        return int(sum(a.size for a in self.values.values()))


def tunable_param_count(variant: str, emb_dim: int, num_classes: int) -> int:
    if variant == PROMPT:
        return emb_dim
    if variant == LINEAR_PROMPT:
        return emb_dim * emb_dim
    if variant == NO_PROMPT:
        return emb_dim * num_classes + num_classes
    raise ContractError(f"unknown variant {variant!r}")


class EmbeddingCache:
    """Frozen node embeddings of a collection, computed once per graph.

    Instance subgraphs are the ``delta``-hop contextual subgraph at node
    level and the whole graph at graph level.
    """

    def __init__(self, collection: GraphCollection, params: EncoderParams, delta: int = 1):
        if collection.feature_dim != params.config.input_dim:
            raise DimensionMismatchError(
                f"dataset {collection.name} has feature_dim {collection.feature_dim}, "
                f"checkpoint expects input_dim {params.config.input_dim}"
            )
        self.collection = collection
        self.params = params
        self.delta = delta
        self._emb: dict[int, np.ndarray] = {}
        self._ctx: dict[int, ContextIndex] = {}

    @property
    def emb_dim(self) -> int:
        return self.params.config.emb_dim

    def embeddings(self, gi: int) -> np.ndarray:
        if gi not in self._emb:
            self.warm([gi])
        return self._emb[gi]

    def warm(self, graph_ids) -> None:
        """Encode graphs in fixed index-aligned chunks.

        Chunking by index keeps every embedding independent of access order,
        so results do not depend on which task touched a graph first.
        """
        n = len(self.collection)
        for c in sorted({gi // WARM_CHUNK for gi in graph_ids}):
            ids = range(c * WARM_CHUNK, min(n, (c + 1) * WARM_CHUNK))
            if all(gi in self._emb for gi in ids):
                continue
            batch = GraphBatch.from_graphs([self.collection[gi] for gi in ids])
            H = encode_batch(batch, self.params)
            for j, gi in enumerate(ids):
                self._emb.setdefault(gi, H[batch.node_offsets[j]:batch.node_offsets[j + 1]])

    def context(self, gi: int) -> ContextIndex:
        if gi not in self._ctx:
            self._ctx[gi] = context_index(self.collection[gi], self.delta)
        return self._ctx[gi]

    def instance_nodes(self, level: str, ref) -> tuple[int, np.ndarray]:
        if level == NODE:
            gi, v = ref
            return gi, self.context(gi).nodes_of(v)
        if level == GRAPH:
            return ref, np.arange(self.collection[ref].num_nodes)
        raise ContractError(f"unknown level {level!r}")

    def rows(self, level: str, refs) -> tuple[np.ndarray, np.ndarray]:
        """Stacked node-embedding rows of every instance plus owning instance ids."""
        blocks, segs = [], []
        for i, ref in enumerate(refs):
            gi, nodes = self.instance_nodes(level, ref)
            blocks.append(self.embeddings(gi)[nodes])
            segs.append(np.full(nodes.shape[0], i, dtype=np.int64))
        if not blocks:
            return np.zeros((0, self.emb_dim), dtype=self.params.dtype), np.zeros(0, np.int64)
        return np.concatenate(blocks, axis=0), np.concatenate(segs)


# ---------------------------------------------------------------------------
# prototypes and prediction
# ---------------------------------------------------------------------------

def class_prototypes(support_embeddings: dict) -> dict:
    """Mean embedding per class."""
    out = {}
    for c, embs in support_embeddings.items():
        if len(embs) == 0:
            raise ContractError(f"class {c} has no support embeddings")
        arr = np.asarray(embs)
        out[c] = (arr.astype(np.float64).sum(axis=0) / arr.shape[0]).astype(arr.dtype)
    return out


def _cosine_table(instances: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    x = np.asarray(instances, dtype=np.float64)
    y = np.asarray(prototypes, dtype=np.float64)
    xn = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    yn = y / np.maximum(np.linalg.norm(y, axis=1, keepdims=True), 1e-12)
    return np.clip(xn @ yn.T, -1.0, 1.0)


def predict_many(instances: np.ndarray, prototypes: dict) -> np.ndarray:
    classes = sorted(prototypes)
    table = _cosine_table(np.atleast_2d(instances), np.stack([prototypes[c] for c in classes]))
    # argmax returns the first maximum, i.e. the smallest class id on ties
    return np.asarray(classes)[np.argmax(table, axis=1)]


def predict(instance_embedding, prototypes: dict) -> int:
    """Class whose prototype is most cosine-similar; ties go to the smallest id."""
    if not prototypes:
        raise ContractError("predict needs at least one prototype")
    return int(predict_many(np.asarray(instance_embedding)[None, :], prototypes)[0])


# ---------------------------------------------------------------------------
# differentiable head application and losses
# ---------------------------------------------------------------------------

def apply_head(rows: np.ndarray, segments: np.ndarray, count: int, variant: str, head: dict) -> Tensor:
    """Subgraph embeddings of ``count`` instances under the given head.

    The prompt variant reweights every node embedding before summation; the
    linear prompt multiplies each by ``P``. The no-prompt head uses plain
    sum pooling here and applies its classifier in :func:`classifier_logits`.
    """
    R = Tensor(rows)
    if variant == PROMPT:
        R = ad.mul(R, head["p"])
    elif variant == LINEAR_PROMPT:
        R = ad.matmul(R, ad.transpose(head["P"]))
    return ad.segment_sum(R, segments, count)


def prototype_matrix(s_support: Tensor, labels: np.ndarray, classes) -> Tensor:
    """Differentiable per-class means of ``s_support`` rows, in ``classes`` order."""
    index = {c: j for j, c in enumerate(classes)}
    missing = set(classes) - set(labels.tolist())
    if missing:
        raise ContractError(f"classes {sorted(missing)} have no support instances")
    seg = np.array([index[c] for c in labels.tolist()], dtype=np.int64)
    counts = np.bincount(seg, minlength=len(classes)).astype(s_support.dtype)
    inv = np.repeat((1.0 / counts)[:, None], s_support.shape[1], axis=1).astype(s_support.dtype)
    return ad.mul(ad.segment_sum(s_support, seg, len(classes)), Tensor(inv))


def _one_hot(labels, classes, dtype) -> np.ndarray:
    index = {c: j for j, c in enumerate(classes)}
    unknown = [c for c in labels.tolist() if c not in index]
    if unknown:
        raise ContractError(f"labels {sorted(set(unknown))} absent from prototype classes {list(classes)}")
    out = np.zeros((labels.shape[0], len(classes)), dtype=dtype)
    out[np.arange(labels.shape[0]), [index[c] for c in labels.tolist()]] = 1
    return out


def prototype_loss(s_inst: Tensor, labels: np.ndarray, prototypes: Tensor, classes, tau: float) -> Tensor:
    """Summed softmax loss of cosine similarity to class prototypes."""
    onehot = Tensor(_one_hot(labels, classes, s_inst.dtype))
    sims = ad.div_scalar(cosine_matrix(s_inst, prototypes), tau)
    log_norm = ad.log(ad.sum(ad.exp(sims), axis=1))
    return ad.sum(ad.sub(log_norm, ad.sum(ad.mul(sims, onehot), axis=1)))


def classifier_logits(s: Tensor, head: dict) -> Tensor:
    return ad.add(ad.matmul(s, head["W"]), head["b"])


def cross_entropy(logits: Tensor, labels: np.ndarray, classes) -> Tensor:
    onehot = Tensor(_one_hot(labels, classes, logits.dtype))
    # constant shift keeps exp bounded and leaves the gradient unchanged
    shift = Tensor(np.repeat(logits.data.max(axis=1, keepdims=True), logits.shape[1], axis=1))
    z = ad.sub(logits, shift)
    return ad.sum(ad.sub(ad.log(ad.sum(ad.exp(z), axis=1)), ad.sum(ad.mul(z, onehot), axis=1)))


@dataclass
class _Instances:
    rows: np.ndarray
    segments: np.ndarray
    labels: np.ndarray

    @property
    def count(self) -> int:
        return int(self.labels.shape[0])


def labeled_instances(cache: EmbeddingCache, level: str, labeled) -> _Instances:
    refs = [r for r, _ in labeled]
    rows, segs = cache.rows(level, refs)
    return _Instances(rows, segs, np.array([c for _, c in labeled], dtype=np.int64))


def head_loss(variant, head, inst: _Instances, proto_inst: _Instances, classes, tau) -> Tensor:
    s = apply_head(inst.rows, inst.segments, inst.count, variant, head)
    if variant == NO_PROMPT:
        return cross_entropy(classifier_logits(s, head), inst.labels, classes)
    s_proto = s if proto_inst is inst else apply_head(
        proto_inst.rows, proto_inst.segments, proto_inst.count, variant, head
    )
    protos = prototype_matrix(s_proto, proto_inst.labels, classes)
    return prototype_loss(s, inst.labels, protos, classes, tau)


def prompt_loss(
    cache: EmbeddingCache,
    task: FewShotTask,
    head: TunedHead | dict,
    tau: float,
    labeled=None,
    variant: str | None = None,
) -> Tensor:
    """Prototype loss of ``labeled`` (default: the support) under ``head``.

    Prototypes are rebuilt from the task support with the current head, so
    the result depends on the head only; encoder weights enter as constants.
    """
    if isinstance(head, TunedHead):
        variant, values = head.variant, {k: Tensor(v) for k, v in head.values.items()}
    else:
        values = head
    if variant not in (PROMPT, LINEAR_PROMPT):
        raise ContractError("prompt_loss applies to the prompt and linear_prompt variants")
    support = labeled_instances(cache, task.level, task.support)
    inst = support if labeled is None else labeled_instances(cache, task.level, labeled)
    if inst.count == 0:
        raise ContractError("prompt_loss needs a nonempty labelled set")
    return head_loss(variant, values, inst, support, task.classes, tau)


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

def head_tensors(head: TunedHead) -> dict:
    return {k: Tensor(v) for k, v in head.values.items()}


def predict_instances(cache: EmbeddingCache, task: FewShotTask, head: TunedHead, labeled) -> np.ndarray:
    """Predicted class ids for ``labeled`` refs given the task support and head."""
    values = head_tensors(head)
    inst = labeled_instances(cache, task.level, labeled)
    s = apply_head(inst.rows, inst.segments, inst.count, head.variant, values)
    if head.variant == NO_PROMPT:
        logits = classifier_logits(s, values).data
        return np.asarray(head.classes)[np.argmax(logits, axis=1)]
    support = labeled_instances(cache, task.level, task.support)
    s_sup = apply_head(support.rows, support.segments, support.count, head.variant, values).data
    by_class = {c: [] for c in task.classes}
    for vec, c in zip(s_sup, support.labels.tolist()):
        by_class[c].append(vec)
    return predict_many(s.data, class_prototypes(by_class))


def initial_head(variant: str, emb_dim: int, classes, seed, dtype=np.float32) -> TunedHead:
    if variant == PROMPT:
        values = {"p": np.ones(emb_dim, dtype=dtype)}
    elif variant == LINEAR_PROMPT:
        values = {"P": np.eye(emb_dim, dtype=dtype)}
    elif variant == NO_PROMPT:
        rng = np.random.default_rng(seed)
        bound = np.sqrt(6.0 / (emb_dim + len(classes)))
        values = {
            "W": rng.uniform(-bound, bound, size=(emb_dim, len(classes))).astype(dtype),
            "b": np.zeros(len(classes), dtype=dtype),
        }
    else:
        raise ContractError(f"unknown variant {variant!r}")
    return TunedHead(variant, values, tuple(classes))


def tune_head(
    task: FewShotTask,
    cache: EmbeddingCache,
    config: TuneConfig,
    val_task: FewShotTask | None = None,
) -> TunedHead:
    """Optimise the task head with Adam while the encoder stays frozen.

    After every epoch (and once before the first) the head is scored on the
    validation support, with prototypes built from the training support.
    The best head by validation accuracy, ties broken by lower validation
    loss, is returned; ``patience`` epochs without improvement stop the run.
    Without a validation task, selection uses the training loss.
    """
    head = initial_head(config.variant, cache.emb_dim, task.classes,
                        derive_seed(config.seed, "head"), cache.params.dtype)
    arrays = {k: v.copy() for k, v in head.values.items()}
    support = labeled_instances(cache, task.level, task.support)
    val = labeled_instances(cache, task.level, val_task.support) if val_task is not None else None

    def score() -> tuple[float, float]:
        consts = {k: Tensor(v) for k, v in arrays.items()}
        if val is None:
            return 0.0, -float(head_loss(config.variant, consts, support, support, task.classes, config.tau).data)
        probe = TunedHead(config.variant, arrays, task.classes)
        pred = predict_instances(cache, task, probe, val_task.support)
        acc = float(np.mean(pred == val.labels))
        vloss = float(head_loss(config.variant, consts, val, support, task.classes, config.tau).data)
        return acc, -vloss

    best_key, best_arrays, best_epoch = score(), {k: v.copy() for k, v in arrays.items()}, 0
    opt = Adam(arrays, lr=config.learning_rate)
    history, stall, epoch = [], 0, 0
    for epoch in range(1, config.max_epochs + 1):
        params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        loss = head_loss(config.variant, params, support, support, task.classes, config.tau)
        opt.step(ad.backward(loss, params))
        history.append(float(loss.data))
        key = score()
        if key > best_key:
            best_key, best_epoch, stall = key, epoch, 0
            best_arrays = {k: v.copy() for k, v in arrays.items()}
        else:
            stall += 1
            if stall >= config.patience:
                break
    return TunedHead(config.variant, best_arrays, tuple(task.classes), best_epoch, epoch, history)


def save_head(head: TunedHead, path, run_config: dict | None = None):
    body = {
        "variant": head.variant,
        "classes": list(head.classes),
        "best_epoch": head.best_epoch,
        "epochs_run": head.epochs_run,
        "values": {k: encode_array(v) for k, v in head.values.items()},
    }
    if run_config is not None:
        body["run_config"] = run_config
    return write_document(path, "head", body)


def load_head(path) -> TunedHead:
    doc = read_document(path, "head")
    if doc.get("variant") not in VARIANTS:
        raise ContractError(f"{path}: unknown head variant {doc.get('variant')!r}")
    return TunedHead(
        doc["variant"],
        {k: decode_array(v) for k, v in doc["values"].items()},
        tuple(doc["classes"]),
        int(doc["best_epoch"]),
        int(doc["epochs_run"]),
    )
