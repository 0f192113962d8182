"""Command-line interface: ingest, train, evaluate, explain, ablate, bench.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Standard output
carries only summary lines; logs go to standard error.  Every run writes a
manifest (command, config, seed, version, wall clock) into the output
directory, and all files are written atomically.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .datasets import (
    SPLIT_CODES,
    InteractionDataset,
    build_graph,
    load_interactions,
    read_split_manifest,
    save_interactions,
    split_dataset,
    whiten_vectors,
    write_split_manifest,
)
from .evaluation import (
    evaluate_mse,
    explain_prediction,
    export_factor_scores,
    predict_pairs_arrays,
    run_ablation,
    runtime_bench,
    sparsity_report,
    write_predictions,
)
from .ioutil import atomic_write_text
from .model import VARIANTS
from .training import TrainConfig, fit, load_model, save_checkpoint


class UsageError(Exception):
    pass


class CliParser(argparse.ArgumentParser):
    """argparse variant that reports usage problems with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


CONFIG_FLAGS = [f.name for f in dataclasses.fields(TrainConfig)]


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "int":
            parser.add_argument(flag, dest=f.name, type=int, default=None)
        elif f.type == "float":
            parser.add_argument(flag, dest=f.name, type=float, default=None)
        elif f.type == "bool":
            parser.add_argument(flag, dest=f.name, default=None,
                                action=argparse.BooleanOptionalAction)
        else:
            parser.add_argument(flag, dest=f.name, type=str, default=None)


def _resolve_config(args) -> TrainConfig:
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {name: getattr(args, name) for name in CONFIG_FLAGS
                 if getattr(args, name, None) is not None}
    return config.replace(**overrides).validate()


def _load_dataset(args) -> InteractionDataset:
    dataset = load_interactions(args.data, vectors_path=args.vectors)
    if getattr(args, "split_manifest", None):
        dataset.split = read_split_manifest(args.split_manifest, len(dataset))
    return dataset


def _ensure_split(dataset: InteractionDataset, seed: int) -> None:
    if dataset.split is None:
        split_dataset(dataset, seed)


def _write_manifest(out_dir: Path, command: str, seed, config: TrainConfig | None,
                    started: float, outputs: list[str], args=None) -> None:
    manifest = {
        "command": command,
        "version": f"dgclr-{__version__}",
        "seed": seed,
        "config": dataclasses.asdict(config) if config is not None else None,
        "args": {k: v for k, v in sorted(vars(args).items()) if k != "func"}
                if args is not None else None,
        "wall_clock_s": round(time.time() - started, 6),
        "outputs": sorted(outputs),
    }
    atomic_write_text(out_dir / "manifest.json", json.dumps(manifest, indent=2) + "\n")


def _history_text(history) -> str:
    lines = ["epoch\ttrain_loss\tsup\tfnd\tfed\tval_mse"]
    for row in history:
        lines.append(f"{row.epoch}\t{row.train_loss!r}\t{row.sup!r}"
                     f"\t{row.fnd!r}\t{row.fed!r}\t{row.val_mse!r}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ commands


def cmd_ingest(args) -> int:
    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_interactions(args.data, vectors_path=args.vectors)
    if args.whiten:
        vectors = np.stack([it.review_vec for it in dataset.interactions])
        whitened = whiten_vectors(vectors, args.whiten)
        for it, vec in zip(dataset.interactions, whitened):
            it.review_vec = vec
        dataset.d = args.whiten
        _log(f"whitened review vectors to d={args.whiten}")
    split_dataset(dataset, args.seed)
    save_interactions(dataset, out / "data.tsv")
    write_split_manifest(dataset, out / "split.tsv")
    _write_manifest(out, "ingest", args.seed, None, started,
                    ["data.tsv", "split.tsv"], args=args)
    counts = np.bincount(dataset.split, minlength=3)
    print(f"users={dataset.n_users} items={dataset.n_items} "
          f"interactions={len(dataset)} d={dataset.d} "
          f"split={counts[0]}/{counts[1]}/{counts[2]}")
    return 0


def cmd_train(args) -> int:
    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = _resolve_config(args)
    dataset = _load_dataset(args)
    _ensure_split(dataset, config.seed)
    _log(f"training on {len(dataset)} interactions "
         f"({int((dataset.split == 0).sum())} train edges)")
    result = fit(dataset, config, log=lambda row: _log(
        f"epoch {row.epoch}: loss={row.train_loss:.5f} val_mse={row.val_mse:.5f}"))

    outputs = ["checkpoint.ck", "history.tsv"]
    save_checkpoint(out / "checkpoint.ck", result.store, config,
                    epoch=result.best_epoch, best_val_mse=result.best_val_mse)
    atomic_write_text(out / "history.tsv", _history_text(result.history))
    if args.export_scores:
        export_factor_scores(out / "factor_scores.tsv", result.net, result.graph, dataset)
        outputs.append("factor_scores.tsv")
    _write_manifest(out, "train", config.seed, config, started, outputs, args=args)
    status = "diverged" if result.diverged else "ok"
    print(f"trained epochs={len(result.history)} best_epoch={result.best_epoch} "
          f"best_val_mse={result.best_val_mse!r} status={status}")
    return 0


def cmd_evaluate(args) -> int:
    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = _load_dataset(args)
    net, config, _ = load_model(args.checkpoint, dataset)
    _ensure_split(dataset, config.seed)
    graph = build_graph(dataset)
    split_code = SPLIT_CODES[args.split]
    mse = evaluate_mse(net, graph, dataset, split_code, clip=args.clip)

    outputs = ["predictions.tsv"]
    users, items, ratings, _ = dataset.pairs(split_code)
    pred, alpha, votes = predict_pairs_arrays(net, graph, users, items, clip=args.clip)
    write_predictions(out / "predictions.tsv", dataset, split_code,
                      users, items, ratings, pred, alpha, votes)
    if args.buckets:
        boundaries = tuple(int(b) for b in args.buckets.split(","))
        report = sparsity_report(net, graph, dataset, boundaries, split_code,
                                 clip=args.clip)
        atomic_write_text(out / "report.tsv", report.to_text())
        outputs.append("report.tsv")
    _write_manifest(out, "evaluate", config.seed, config, started, outputs, args=args)
    print(f"mse {mse!r}")
    return 0


def cmd_explain(args) -> int:
    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = _load_dataset(args)
    net, config, _ = load_model(args.checkpoint, dataset)
    _ensure_split(dataset, config.seed)
    graph = build_graph(dataset)
    record = explain_prediction(net, graph, dataset, args.user, args.item)
    atomic_write_text(out / "explain.txt", record.to_text() + "\n")
    _write_manifest(out, "explain", config.seed, config, started,
                    ["explain.txt"], args=args)
    print(record.to_text())
    return 0


def _ablation_job(payload):
    dataset, config, variant, seed = payload
    result, test_mse = run_ablation(dataset, config.replace(seed=seed), variant)
    return variant, seed, result.best_val_mse, test_mse


def cmd_ablate(args) -> int:
    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = _resolve_config(args)
    dataset = _load_dataset(args)
    _ensure_split(dataset, config.seed)

    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    for v in variants:
        if v not in VARIANTS:
            raise UsageError(f"unknown variant {v!r}")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [config.seed]

    jobs = [(dataset, config, v, s) for v in variants for s in seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_ablation_job, jobs))
    else:
        rows = [_ablation_job(job) for job in jobs]

    lines = ["variant\tseed\tval_mse\ttest_mse"]
    for variant, seed, val_mse, test_mse in rows:
        lines.append(f"{variant}\t{seed}\t{val_mse!r}\t{test_mse!r}")
        print(f"variant={variant} seed={seed} test_mse={test_mse!r}")
    atomic_write_text(out / "ablation.tsv", "\n".join(lines) + "\n")
    _write_manifest(out, "ablate", config.seed, config, started,
                    ["ablation.tsv"], args=args)
    return 0


def cmd_bench(args) -> int:
    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    edges = tuple(int(e) for e in args.edges.split(","))
    result = runtime_bench(edges, d=args.d, n_factors=args.K, n_layers=args.L,
                           seed=args.seed, repeats=args.repeats)
    atomic_write_text(out / "bench.tsv", result.to_text())
    _write_manifest(out, "bench", args.seed, None, started, ["bench.tsv"], args=args)
    print(result.to_text().rstrip("\n"))
    return 0


# ---------------------------------------------------------------- entry point


def build_parser() -> CliParser:
    parser = CliParser(prog="dgclr",
                       description="Disentangled review-based rating prediction")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    p = sub.add_parser("ingest", help="validate, whiten, and split a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--vectors", default=None)
    p.add_argument("--whiten", type=int, default=None,
                   help="whiten review vectors down to this dimension")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--vectors", default=None)
    p.add_argument("--split-manifest", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--export-scores", action="store_true")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vectors", default=None)
    p.add_argument("--split-manifest", default=None)
    p.add_argument("--split", choices=list(SPLIT_CODES), default="test")
    p.add_argument("--clip", action="store_true",
                   help="clip predictions into the rating range")
    p.add_argument("--buckets", default=None,
                   help="comma-separated degree boundaries for the sparsity report")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="explain one (user, item) prediction")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vectors", default=None)
    p.add_argument("--split-manifest", default=None)
    p.add_argument("--user", required=True)
    p.add_argument("--item", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("ablate", help="train and evaluate ablation variants")
    p.add_argument("--data", required=True)
    p.add_argument("--vectors", default=None)
    p.add_argument("--split-manifest", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--variants", default=None,
                   help=f"comma-separated subset of {','.join(VARIANTS)}")
    p.add_argument("--seeds", default=None, help="comma-separated seeds")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="runtime scaling benchmark")
    p.add_argument("--edges", default="1000,10000,100000")
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--K", type=int, default=2)
    p.add_argument("--L", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - boundary of the process
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
