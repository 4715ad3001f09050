"""Experiment runner: k-shot protocol, reports, efficiency and scalability studies."""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig
from .encoder import EncoderConfig
from .errors import ContractError, DimensionMismatchError
from .graph import GraphCollection
from .optim import Adam
from .pretrain import Checkpoint, run_pretraining
from .sampling import GRAPH, TaskTriple, sample_kshot_task
from .seeding import derive_seed
from .tuning import (
    LINEAR_PROMPT, NO_PROMPT, PROMPT, EmbeddingCache, TunedHead, TuneConfig,
    labeled_instances, head_loss, initial_head, predict_instances, tunable_param_count, tune_head,
)

log = logging.getLogger(__name__)

CSV_COLUMNS = ("dataset", "level", "k", "variant", "task_id", "accuracy", "tune_epochs", "seconds")


@dataclass
class TaskRecord:
    task_id: int
    accuracy: float
    tune_epochs: int
    best_epoch: int
    seconds: float
    test_size: int


@dataclass
class ExperimentReport:
    dataset: str
    level: str
    k: int
    variant: str
    accuracies: list[float]
    mean: float
    std: float
    seconds: float
    config: dict
    seed: int
    tasks: list[TaskRecord] = field(default_factory=list)

    @classmethod
    def build(cls, dataset, level, k, variant, records: Sequence[TaskRecord], seconds, config, seed):
        records = sorted(records, key=lambda r: r.task_id)
        accs = [r.accuracy for r in records]
        mean, std = summarize(accs)
        return cls(dataset, level, k, variant, accs, mean, std, seconds, config, seed, list(records))

    def is_consistent(self) -> bool:
        mean, std = summarize(self.accuracies)
        return mean == self.mean and std == self.std and all(0.0 <= a <= 1.0 for a in self.accuracies)

    def to_dict(self) -> dict:
        return asdict(self)

    def csv_rows(self) -> list[dict]:
        return [
            {
                "dataset": self.dataset, "level": self.level, "k": self.k, "variant": self.variant,
                "task_id": r.task_id, "accuracy": r.accuracy, "tune_epochs": r.tune_epochs,
                "seconds": r.seconds,
            }
            for r in self.tasks
        ]

    def table(self) -> str:
        return format_table([self])

    def write(self, directory) -> Path:
        """Write report.txt, report.csv and report.json into ``directory``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "report.txt").write_text(self.table() + "\n")
        with (directory / "report.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            writer.writerows(self.csv_rows())
        (directory / "report.json").write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        return directory


def summarize(accuracies: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation, summed in task order."""
    a = np.asarray(accuracies, dtype=np.float64)
    if a.size == 0:
        return 0.0, 0.0
    return float(a.mean()), float(a.std())


def format_table(reports: Sequence[ExperimentReport]) -> str:
    header = f"{'dataset':<12} {'level':<6} {'k':>3} {'variant':<14} {'tasks':>5} {'accuracy (%)':>16} {'seconds':>9}"
    lines = [header, "-" * len(header)]
    for r in reports:
        acc = f"{100 * r.mean:6.2f} ± {100 * r.std:5.2f}"
        lines.append(
            f"{r.dataset:<12} {r.level:<6} {r.k:>3} {r.variant:<14} {len(r.accuracies):>5} {acc:>16} {r.seconds:>9.1f}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# single tasks
# ---------------------------------------------------------------------------

def evaluate_task(triple: TaskTriple, cache: EmbeddingCache, head: TunedHead) -> float:
    """Fraction of test-query instances predicted correctly."""
    if not triple.test_query:
        raise ContractError("test query is empty")
    pred = predict_instances(cache, triple.train, head, triple.test_query)
    truth = np.array([c for _, c in triple.test_query])
    return float(np.mean(pred == truth))


def build_tasks(collection: GraphCollection, config: RunConfig) -> list[TaskTriple]:
    proto = config.raw["protocol"]
    return [
        sample_kshot_task(
            collection, config.level, config.k, proto["class_subset"],
            seed=derive_seed(config.seed, "task", config.level, config.k, t),
            min_graph_nodes=proto["min_graph_nodes"],
        )
        for t in range(config.num_tasks)
    ]


def _run_task(task_id: int, triple: TaskTriple, cache: EmbeddingCache, tune_cfg: TuneConfig) -> TaskRecord:
    start = time.perf_counter()
    head = tune_head(triple.train, cache, tune_cfg, triple.val)
    acc = evaluate_task(triple, cache, head)
    return TaskRecord(task_id, acc, head.epochs_run, head.best_epoch,
                      time.perf_counter() - start, len(triple.test_query))


def check_compatible(collection: GraphCollection, checkpoint: Checkpoint) -> None:
    if collection.feature_dim != checkpoint.encoder_config.input_dim:
        raise DimensionMismatchError(
            f"dataset {collection.name} has feature_dim {collection.feature_dim} but the "
            f"checkpoint encoder expects input_dim {checkpoint.encoder_config.input_dim}"
        )


def make_cache(collection, checkpoint: Checkpoint, config: RunConfig) -> EmbeddingCache:
    check_compatible(collection, checkpoint)
    cache = EmbeddingCache(collection, checkpoint.params, delta=config.raw["tune"]["delta"])
    return cache


def run_experiment(
    config: RunConfig,
    checkpoint: Checkpoint | None = None,
    collection: GraphCollection | None = None,
    cache: EmbeddingCache | None = None,
) -> ExperimentReport:
    """Sample the configured k-shot tasks, tune a head per task, aggregate accuracy.

    Task seeds derive from the master seed, so every variant sees the same
    tasks. Pre-trains first when no checkpoint is supplied.
    """
    start = time.perf_counter()
    collection = collection if collection is not None else config.load_dataset()
    if checkpoint is None:
        checkpoint = run_pretraining(
            collection, config.pretrain_config(), config.encoder_config(collection.feature_dim)
        )
    cache = cache if cache is not None else make_cache(collection, checkpoint, config)
    tasks = build_tasks(collection, config)
    graph_ids = sorted({ref if config.level == GRAPH else ref[0]
                        for t in tasks for ref, _ in (*t.train.support, *t.val.support, *t.test_query)})
    cache.warm(graph_ids)

    def job(t):
        return _run_task(t, tasks[t], cache, config.tune_config(t))

    if config.jobs > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            records = list(pool.map(job, range(len(tasks))))
    else:
        records = [job(t) for t in range(len(tasks))]
    for r in records:
        log.info("task=%d accuracy=%.4f epochs=%d", r.task_id, r.accuracy, r.tune_epochs)
    return ExperimentReport.build(
        collection.name, config.level, config.k, config.variant, records,
        time.perf_counter() - start, config.raw, config.seed,
    )


# ---------------------------------------------------------------------------
# efficiency accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EfficiencyReport:
    variant: str
    params: int
    flops: int
    encoder_flops_per_node: int  # informational: perceptron multiply-accumulates


def encoder_macs_per_node(config: EncoderConfig) -> int:
    h = config.hidden_dim
    return config.input_dim * h + h * h + (config.num_layers - 1) * 2 * h * h


def efficiency_report(variant: str, encoder_config: EncoderConfig, class_count: int) -> EfficiencyReport:
    """Tunable parameters and per-instance multiply-accumulates of the head."""
    d = encoder_config.emb_dim
    params = tunable_param_count(variant, d, class_count)
    flops = {PROMPT: d, LINEAR_PROMPT: d * d, NO_PROMPT: d * class_count}[variant]
    return EfficiencyReport(variant, params, flops, encoder_macs_per_node(encoder_config))


# ---------------------------------------------------------------------------
# scalability
# ---------------------------------------------------------------------------

@dataclass
class ScalabilityResult:
    rows: list[dict]
    slope: float | None
    intercept: float | None
    r2: float | None


def time_tuning_epoch(cache: EmbeddingCache, graph_ids: Sequence[int], tune_cfg: TuneConfig, repeats: int = 3) -> float:
    """Median wall time of one prompt-tuning epoch over whole-graph instances."""
    graphs = cache.collection.graphs
    labeled = tuple((gi, graphs[gi].graph_label or 0) for gi in graph_ids)
    classes = tuple(sorted({c for _, c in labeled}))
    cache.warm(graph_ids)
    inst = labeled_instances(cache, GRAPH, labeled)
    head = initial_head(tune_cfg.variant, cache.emb_dim, classes, tune_cfg.seed, cache.params.dtype)
    arrays = {k: v.copy() for k, v in head.values.items()}
    opt = Adam(arrays, lr=tune_cfg.learning_rate)
    times = []
    for _ in range(max(3, repeats)):
        t0 = time.perf_counter()
        params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        loss = head_loss(tune_cfg.variant, params, inst, inst, classes, tune_cfg.tau)
        opt.step(ad.backward(loss, params))
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bucket_members(collection: GraphCollection, center: float, half_width: float) -> list[int]:
    return [gi for gi, g in enumerate(collection) if abs(g.num_nodes - center) <= half_width]


def scalability_run(
    collection: GraphCollection,
    size_buckets: Sequence[float],
    cache: EmbeddingCache,
    tune_cfg: TuneConfig | None = None,
    per_bucket: int = 10,
    repeats: int = 3,
    half_width: float = 5.0,
    seed: int = 0,
) -> ScalabilityResult:
    """Per-epoch tuning time for graphs grouped by size.

    Each bucket collects graphs within ``half_width`` nodes of its center and
    samples ``per_bucket`` of them; empty buckets are skipped with a warning.
    """
    tune_cfg = tune_cfg or TuneConfig()
    rows = []
    for center in size_buckets:
        members = bucket_members(collection, center, half_width)
        if not members:
            log.warning("bucket %s is empty, skipped", center)
            continue
        rng = np.random.default_rng(derive_seed(seed, "bucket", center))
        pick = sorted(rng.choice(members, size=min(per_bucket, len(members)), replace=False).tolist())
        secs = time_tuning_epoch(cache, pick, tune_cfg, repeats)
        sizes = [collection[gi].num_nodes for gi in pick]
        rows.append({"bucket": center, "graphs": pick, "mean_size": float(np.mean(sizes)), "seconds": secs})
    slope = intercept = r2 = None
    if len(rows) >= 2:
        x = np.array([r["mean_size"] for r in rows])
        y = np.array([r["seconds"] for r in rows])
        slope, intercept = (float(v) for v in np.polyfit(x, y, 1))
        resid = y - (slope * x + intercept)
        ss = float(np.sum((y - y.mean()) ** 2))
        r2 = 1.0 - float(np.sum(resid ** 2)) / ss if ss > 0 else 1.0
    return ScalabilityResult(rows, slope, intercept, r2)


# ---------------------------------------------------------------------------
# parameter sweeps
# ---------------------------------------------------------------------------

SWEEP_AXES = ("delta", "hidden_dim")


def sweep_overrides(axis: str, value) -> dict:
    if axis == "delta":
        return {"pretrain": {"delta": int(value)}, "tune": {"delta": int(value)}}
    if axis == "hidden_dim":
        return {"encoder": {"hidden_dim": int(value)}}
    raise ContractError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def sweep(axis: str, values: Sequence, base: RunConfig, collection: GraphCollection | None = None) -> list[tuple[object, ExperimentReport]]:
    """Re-pretrain and re-evaluate once per value of ``axis``."""
    if not values:
        raise ContractError("sweep needs at least one value")
    collection = collection if collection is not None else base.load_dataset()
    out = []
    for value in values:
        cfg = base.with_overrides(sweep_overrides(axis, value))
        out.append((value, run_experiment(cfg, collection=collection)))
    return out
