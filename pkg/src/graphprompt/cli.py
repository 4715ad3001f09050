"""Command-line entry point.

Exit codes::

    0  success
    1  any other package error
    2  invalid configuration, dataset or input document
    3  pre-training or task construction failed
    4  dataset and checkpoint dimensions disagree
    5  gradient check failed

Logs go to stderr; stdout carries only the final summary.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import DATA_DIR_ENV, RunConfig
from .encoder import init_params
from .errors import (
    CheckpointError, ConfigError, DimensionMismatchError, FormatError, GraphPromptError,
    IngestionError, PretrainingError, SamplingError, TaskConstructionError,
)
from .gradcheck import MODULES, TOLERANCE, run_suites
from .harness import (
    SWEEP_AXES, build_tasks, efficiency_report, evaluate_task, format_table, make_cache,
    run_experiment, scalability_run, sweep,
)
from .pretrain import Checkpoint, load_checkpoint, run_pretraining, save_checkpoint
from .seeding import derive_seed
from .tuning import VARIANTS, EmbeddingCache, save_head, tune_head

log = logging.getLogger("graphprompt")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_TRAINING, EXIT_DIM, EXIT_GRADCHECK = 0, 1, 2, 3, 4, 5


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _overrides(args) -> dict:
    """Config overrides from whichever common flags were given."""
    out: dict = {}
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    if getattr(args, "jobs", None) is not None:
        out["jobs"] = args.jobs
    proto = {}
    for flag, key in (("level", "level"), ("k", "k"), ("num_tasks", "num_tasks")):
        if getattr(args, flag, None) is not None:
            proto[key] = getattr(args, flag)
    if proto:
        out["protocol"] = proto
    if getattr(args, "variant", None) is not None:
        out["tune"] = {"variant": args.variant}
    return out


def _load_config(args) -> RunConfig:
    if args.config is None:
        raise ConfigError("missing required config key 'dataset.path' (no --config given)")
    return RunConfig.from_file(args.config, _overrides(args))


def _checkpoint_for(args, config: RunConfig, collection) -> Checkpoint:
    if args.ckpt:
        return load_checkpoint(args.ckpt)
    log.info("no --ckpt given, pre-training first")
    return run_pretraining(collection, config.pretrain_config(), config.encoder_config(collection.feature_dim))


def _out_dir(args, config: RunConfig, default: str) -> Path:
    return Path(args.out) if getattr(args, "out", None) else config.output_dir / default


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    config = _load_config(args)
    collection = config.load_dataset()
    ckpt = run_pretraining(collection, config.pretrain_config(), config.encoder_config(collection.feature_dim))
    save_checkpoint(ckpt, args.out, run_config=config.raw)
    print(
        f"pretrained {collection.name}: initial_loss={ckpt.initial_loss:.6f} "
        f"best_loss={ckpt.best_loss:.6f} best_epoch={ckpt.best_epoch} "
        f"epochs={len(ckpt.history)} -> {args.out}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _load_config(args)
    collection = config.load_dataset()
    ckpt = _checkpoint_for(args, config, collection)
    report = run_experiment(config, checkpoint=ckpt, collection=collection)
    out = report.write(_out_dir(args, config, f"{collection.name}_{config.level}_k{config.k}_{config.variant}"))
    log.info("report written to %s", out)
    print(report.table())
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _load_config(args)
    collection = config.load_dataset()
    ckpt = _checkpoint_for(args, config, collection)
    cache = make_cache(collection, ckpt, config)
    base = _out_dir(args, config, f"{collection.name}_{config.level}_k{config.k}_ablation")
    reports = []
    for variant in args.variants:
        cfg = config.with_overrides({"tune": {"variant": variant}})
        report = run_experiment(cfg, checkpoint=ckpt, collection=collection, cache=cache)
        report.write(base / variant)
        reports.append(report)
    print(format_table(reports))
    return EXIT_OK


def cmd_tune(args) -> int:
    config = _load_config(args)
    collection = config.load_dataset()
    ckpt = _checkpoint_for(args, config, collection)
    cache = make_cache(collection, ckpt, config)
    tasks = build_tasks(collection, config.with_overrides({"protocol": {"num_tasks": args.task_id + 1}}))
    triple = tasks[args.task_id]
    head = tune_head(triple.train, cache, config.tune_config(args.task_id), triple.val)
    acc = evaluate_task(triple, cache, head)
    save_head(head, args.out, run_config=config.raw)
    print(
        f"task={args.task_id} variant={head.variant} params={head.num_params} "
        f"best_epoch={head.best_epoch} accuracy={acc:.4f} -> {args.out}"
    )
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _load_config(args)
    collection = config.load_dataset()
    base = _out_dir(args, config, f"{collection.name}_sweep_{args.axis}")
    results = sweep(args.axis, args.values, config, collection)
    for value, report in results:
        report.write(base / f"{args.axis}={value}")
    lines = [f"{args.axis:>10}  {'accuracy (%)':>16}"]
    for value, report in results:
        lines.append(f"{value:>10}  {100 * report.mean:6.2f} ± {100 * report.std:5.2f}")
    print("\n".join(lines))
    return EXIT_OK


def cmd_scalability(args) -> int:
    config = _load_config(args)
    collection = config.load_dataset()
    if args.ckpt:
        params = load_checkpoint(args.ckpt).params
    else:
        # per-epoch timing does not depend on the weight values
        params = init_params(config.encoder_config(collection.feature_dim), derive_seed(config.seed, "init"))
    if params.config.input_dim != collection.feature_dim:
        raise DimensionMismatchError(
            f"dataset {collection.name} has feature_dim {collection.feature_dim} but the "
            f"encoder expects input_dim {params.config.input_dim}"
        )
    cache = EmbeddingCache(collection, params, delta=config.raw["tune"]["delta"])
    res = scalability_run(collection, args.buckets, cache, config.tune_config(),
                          per_bucket=args.per_bucket, repeats=args.repeats,
                          half_width=args.half_width, seed=config.seed)
    base = _out_dir(args, config, f"{collection.name}_scalability")
    for row in res.rows:
        d = base / f"bucket={row['bucket']:g}"
        d.mkdir(parents=True, exist_ok=True)
        (d / "timing.json").write_text(json.dumps({**row, "config": config.raw}, indent=1, sort_keys=True) + "\n")
    summary = {"rows": res.rows, "slope": res.slope, "intercept": res.intercept, "r2": res.r2, "config": config.raw}
    base.mkdir(parents=True, exist_ok=True)
    (base / "scalability.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    lines = [f"{'bucket':>7} {'graphs':>6} {'mean_size':>9} {'sec/epoch':>11}"]
    for row in res.rows:
        lines.append(f"{row['bucket']:>7g} {len(row['graphs']):>6} {row['mean_size']:>9.1f} {row['seconds']:>11.6f}")
    if res.slope is not None:
        lines.append(f"fit: seconds = {res.slope:.3e} * size + {res.intercept:.3e} (r2={res.r2:.3f})")
    print("\n".join(lines))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suites(args.module, seeds=tuple(range(args.seeds)))
    lines = [f"{'suite':<26} {'max_rel_error':>14} {'checked':>8} {'excluded':>9}  status"]
    for r in results:
        lines.append(f"{r.name:<26} {r.max_relative_error:>14.3e} {r.checked:>8} {r.excluded:>9}  "
                     f"{'ok' if r.passed else 'FAIL'}")
    ok = all(r.passed for r in results)
    lines.append(f"gradcheck {'passed' if ok else 'FAILED'} (tolerance {TOLERANCE:g})")
    print("\n".join(lines))
    return EXIT_OK if ok else EXIT_GRADCHECK


def cmd_inspect(args) -> int:
    config = _load_config(args)
    collection = config.load_dataset()
    summary = collection.summary()
    enc = config.encoder_config(collection.feature_dim)
    rows = [f"{k:<14} {v}" for k, v in summary.items()]
    if collection.graph_class_count:
        rows.append(f"{'efficiency':<14} variant params flops (C={collection.graph_class_count})")
        for variant in VARIANTS:
            e = efficiency_report(variant, enc, collection.graph_class_count)
            rows.append(f"{'':<14} {variant} {e.params} {e.flops}")
    print("\n".join(rows))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(p, config_required: bool = True, protocol: bool = False, ckpt: str | None = None):
    p.add_argument("--config", required=config_required, default=None,
                   help="YAML run configuration (default: none)")
    p.add_argument("--seed", type=int, default=None, help="master seed (default: config seed, 0)")
    p.add_argument("--jobs", type=int, default=None,
                   help="worker threads for per-task tuning (default: config jobs, else all cores)")
    if protocol:
        p.add_argument("--level", choices=("node", "graph"), default=None,
                       help="task level (default: config protocol.level, graph)")
        p.add_argument("--k", type=int, default=None, help="shots per class (default: config protocol.k, 5)")
        p.add_argument("--num-tasks", type=int, default=None,
                       help="number of tasks (default: config protocol.num_tasks, 10 node / 100 graph)")
    if ckpt == "optional":
        p.add_argument("--ckpt", default=None, help="encoder checkpoint (default: pre-train from the config)")
    elif ckpt == "required":
        p.add_argument("--ckpt", required=True, help="encoder checkpoint (required)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphprompt",
        description="Link-prediction pre-training and prompt tuning for few-shot graph learning. "
                    f"Dataset names resolve under ${DATA_DIR_ENV} when no path is configured.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"),
                        help="stderr log level (default: INFO)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("pretrain", help="pre-train an encoder and write a checkpoint")
    _common(p)
    p.add_argument("--out", required=True, help="checkpoint path to write (required)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="run the k-shot protocol and write a report")
    _common(p, protocol=True, ckpt="optional")
    p.add_argument("--variant", choices=VARIANTS, default=None, help="head variant (default: config tune.variant, prompt)")
    p.add_argument("--out", default=None, help="report directory (default: <output_dir>/<dataset>_<level>_k<k>_<variant>)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="evaluate several head variants on identical tasks")
    _common(p, protocol=True, ckpt="optional")
    p.add_argument("--variants", type=lambda s: [v for v in s.split(",") if v], default=list(VARIANTS),
                   help=f"comma-separated variants (default: {','.join(VARIANTS)})")
    p.add_argument("--out", default=None, help="base directory (default: <output_dir>/<dataset>_<level>_k<k>_ablation)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("tune", help="tune the head of one task and write it")
    _common(p, protocol=True, ckpt="optional")
    p.add_argument("--variant", choices=VARIANTS, default=None, help="head variant (default: config tune.variant, prompt)")
    p.add_argument("--task-id", type=int, default=0, help="task index within the protocol (default: 0)")
    p.add_argument("--out", required=True, help="head file to write (required)")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("sweep", help="re-pretrain and evaluate across values of one hyperparameter")
    _common(p, protocol=True)
    p.add_argument("--axis", choices=SWEEP_AXES, required=True, help="hyperparameter to vary (required)")
    p.add_argument("--values", type=_ints, required=True, help="comma-separated values, e.g. 1,2,3 (required)")
    p.add_argument("--out", default=None, help="base directory (default: <output_dir>/<dataset>_sweep_<axis>)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("scalability", help="time one tuning epoch per graph-size bucket")
    _common(p, ckpt="optional")
    p.add_argument("--buckets", type=_float_list, default=[50, 60, 70, 80, 90, 100],
                   help="comma-separated bucket centres in nodes (default: 50,60,70,80,90,100)")
    p.add_argument("--per-bucket", type=int, default=10, help="graphs sampled per bucket (default: 10)")
    p.add_argument("--repeats", type=int, default=3, help="timing repeats, median reported (default: 3)")
    p.add_argument("--half-width", type=float, default=5.0, help="bucket half-width in nodes (default: 5)")
    p.add_argument("--out", default=None, help="base directory (default: <output_dir>/<dataset>_scalability)")
    p.set_defaults(func=cmd_scalability)

    p = sub.add_parser("gradcheck", help="finite-difference check of the training losses")
    p.add_argument("--module", choices=MODULES, default="all", help="which losses to check (default: all)")
    p.add_argument("--seeds", type=int, default=3, help="random fixtures per suite (default: 3)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="summarise a dataset and the head cost of each variant")
    _common(p)
    p.set_defaults(func=cmd_inspect)
    return parser


def _exit_code(exc: GraphPromptError) -> int:
    if isinstance(exc, DimensionMismatchError):
        return EXIT_DIM
    if isinstance(exc, (ConfigError, IngestionError, FormatError, CheckpointError)):
        return EXIT_CONFIG
    if isinstance(exc, (PretrainingError, SamplingError, TaskConstructionError)):
        return EXIT_TRAINING
    return EXIT_ERROR


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)
    try:
        return args.func(args)
    except GraphPromptError as exc:
        code = _exit_code(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
