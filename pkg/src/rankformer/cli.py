"""Command-line entry point: ``rankformer <subcommand> [options]``.

Every :class:`~rankformer.config.RunConfig` key is also a flag
(``k_core`` -> ``--k-core``); flags override ``--config FILE``, which
overrides the defaults. Exit codes: 0 success, 1 a check failed,
2 invalid input or configuration, 3 training diverged.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import torch

from . import __version__
from .bench import SMALL_GRID, BenchGrid, check_scaling, run_bench, write_bench_csv
from .checkpoint import CheckpointError, load_embeddings, save_embeddings
from .config import THREADS_ENV, ConfigError, RunConfig, resolve, write_resolved
from .evaluation import evaluate_split, layer_sweep, write_metrics_csv, write_sweep_csv
from .graph import apply_k_core, load_interactions, load_split, save_split, split_dataset
from .layers import NonFiniteError
from .training import TrainingDiverged, derive_seed, encode, train, write_history
from .verify import run_verify

logger = logging.getLogger("rankformer")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2, 3

# which config keys each subcommand exposes as flags
_DATA_KEYS = ("data", "format", "k_core", "ratios", "split_mode", "split_dir", "seed")
_ENCODER_KEYS = (
    "encoder", "tau", "alpha", "layers", "lambda_reg", "warmup_first_layer",
    "normalize_embeddings", "epsilon_div", "combine",
)
_TRAIN_KEYS = (
    "lr", "weight_decay", "epochs", "batch_size", "negatives_per_positive",
    "patience", "grad_mode", "dim", "dtype", "eval_every",
)
_EVAL_KEYS = ("ks", "mask_train", "mask_val_at_test")
_FIELD_DEFAULTS = {f.name: f.default for f in fields(RunConfig)}


def _add_config_flags(p: argparse.ArgumentParser, keys) -> None:
    for key in keys:
        default = _FIELD_DEFAULTS[key]
        shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
        p.add_argument(
            "--" + key.replace("_", "-"),
            dest=key,
            default=argparse.SUPPRESS,
            metavar="V",
            help=f"(default: {shown})",
        )


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--threads", dest="threads", default=argparse.SUPPRESS, metavar="N",
                        help=f"torch worker threads; 1 = sequential, reproducible (env {THREADS_ENV})")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="rankformer", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="k-core filter and split an interaction file")
    _add_config_flags(p, _DATA_KEYS)
    p.add_argument("--stats-only", action="store_true", help="print graph statistics, write nothing")

    p = sub.add_parser("train", parents=[common], help="train base embeddings on a prepared split")
    _add_config_flags(p, ("split_dir", "out_dir", "seed") + _ENCODER_KEYS + _TRAIN_KEYS + _EVAL_KEYS)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a trained run directory")
    p.add_argument("run_dir", help="directory written by `train`")
    _add_config_flags(p, ("split_dir",) + _EVAL_KEYS)

    p = sub.add_parser("sweep", parents=[common], help="untrained layer sweep, writes sweep.csv")
    _add_config_flags(p, ("split_dir", "out_dir", "seed", "alpha", "dim", "max_layers", "taus", "combine"))

    p = sub.add_parser("verify", parents=[common], help="oracle verification suites")
    p.add_argument("--level", choices=("fast", "full"), default="fast")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="also write the report to this file")
    p.add_argument("--perturb-fast", type=float, default=0.0, help=argparse.SUPPRESS)

    p = sub.add_parser("bench", parents=[common], help="fast vs naive layer scaling benchmark")
    p.add_argument("--grid", choices=("default", "small"), default="default")
    p.add_argument("--no-naive", action="store_true", help="skip the pairwise layer")
    p.add_argument("--out", default="bench.csv")
    return ap


def _overrides(args: argparse.Namespace) -> dict[str, str]:
    return {k: str(v) for k, v in vars(args).items() if k in _FIELD_DEFAULTS}


def _apply_threads(n: int) -> None:
    if n > 0:
        torch.set_num_threads(n)


def _resolve(args) -> RunConfig:
    cfg = resolve(args.config, _overrides(args))
    _apply_threads(cfg.threads)
    return cfg


def cmd_prepare(args) -> int:
    cfg = _resolve(args)
    if not cfg.data:
        raise ConfigError("prepare needs --data")
    raw = load_interactions(cfg.data, cfg.format)
    core = apply_k_core(raw, cfg.k_core)
    users = {u for u, _ in core.pairs}
    items = {i for _, i in core.pairs}
    print(f"raw={len(raw.pairs)} after {cfg.k_core}-core: n={len(users)} m={len(items)} E={len(core.pairs)}")
    if args.stats_only:
        return EXIT_OK
    split = split_dataset(core, cfg.ratios, seed=derive_seed(cfg.seed, "split"), mode=cfg.split_mode)
    manifest = save_split(split, cfg.split_dir, run_seed=cfg.seed, version=__version__)
    write_resolved(cfg, cfg.split_dir)
    print(
        f"split: train={manifest['train_edges']} val={manifest['val_edges']} test={manifest['test_edges']}"
        f" -> {cfg.split_dir}"
    )
    return EXIT_OK


def _print_metrics(rows) -> None:
    for name, res in rows:
        for k in sorted(res.recall):
            print(f"{name}: recall@{k}={res.recall[k]:.4f} ndcg@{k}={res.ndcg[k]:.4f} users={res.users_evaluated}")


def cmd_train(args) -> int:
    cfg = _resolve(args)
    split = load_split(cfg.split_dir)
    enc, tcfg, ecfg = cfg.encoder_config(), cfg.train_config(), cfg.eval_config()
    out = Path(cfg.out_dir)
    write_resolved(cfg, out)
    try:
        result = train(split, enc, tcfg)
    except TrainingDiverged as exc:
        if exc.last_good is not None:
            save_embeddings(out / "last_good.rkf", exc.last_good.params, split.train.n, split.train.m)
        print(f"error: {exc}; last good state saved to {out / 'last_good.rkf'}", file=sys.stderr)
        return EXIT_DIVERGED
    write_history(out / "history.csv", result.history)
    g = split.train
    manifest = {"version": __version__, "epoch": result.best.epoch, "best_val_ndcg@20": result.best.best_val}
    save_embeddings(out / "base.rkf", result.best.params, g.n, g.m, manifest)
    Z = result.encoded(g, enc)
    save_embeddings(out / "embeddings.rkf", Z, g.n, g.m, manifest)
    rows = [("val", evaluate_split(split, Z, "val", ecfg)), ("test", evaluate_split(split, Z, "test", ecfg))]
    write_metrics_csv(out / "metrics.csv", rows)
    last = result.history[-1].epoch if result.history else 0
    print(f"best epoch {result.best.epoch} (ran {last}{', early stop' if result.stopped_early else ''})")
    _print_metrics(rows)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    run = Path(args.run_dir)
    cfg_file = run / "config.txt"
    if not cfg_file.exists():
        raise ConfigError(f"{run} has no config.txt; not a train run directory")
    cfg = resolve(args.config or cfg_file, _overrides(args))
    _apply_threads(cfg.threads)
    split = load_split(cfg.split_dir)
    base, n, m = load_embeddings(run / "base.rkf")
    if (n, m) != (split.train.n, split.train.m):
        raise CheckpointError(f"checkpoint is {n}x{m}, split is {split.train.n}x{split.train.m}")
    enc = cfg.encoder_config()
    with torch.no_grad():
        Z = encode(split.train, torch.from_numpy(base).to(cfg.train_config().torch_dtype), enc)
    ecfg = cfg.eval_config()
    rows = [("val", evaluate_split(split, Z, "val", ecfg)), ("test", evaluate_split(split, Z, "test", ecfg))]
    write_metrics_csv(run / "metrics.csv", rows)
    _print_metrics(rows)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    split = load_split(cfg.split_dir)
    rows = layer_sweep(
        split, max_layers=cfg.max_layers, seed=cfg.seed, d=cfg.dim, taus=cfg.taus, alpha=cfg.alpha,
        lightgcn_combine=cfg.combine,
    )
    out = Path(cfg.out_dir)
    write_resolved(cfg, out)
    write_sweep_csv(out / "sweep.csv", rows)
    for r in rows:
        print(f"{r.encoder:>20s} L={r.layers} ndcg@20={r.ndcg:.4f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    _apply_threads(_threads_from(args))
    report = run_verify(args.level, seed=args.seed, perturb_fast=args.perturb_fast)
    text = report.text()
    print(text)
    if args.report:
        Path(args.report).write_text(text + "\n", encoding="utf-8")
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def cmd_bench(args) -> int:
    _apply_threads(_threads_from(args))
    grid = SMALL_GRID if args.grid == "small" else BenchGrid()
    points = run_bench(grid, include_naive=not args.no_naive)
    write_bench_csv(args.out, points)
    for p in points:
        print(f"{p.sweep:>6s} {p.impl:>5s} n={p.n} m={p.m} E={p.E} d={p.d} median={p.median_s:.4f}s spread={p.spread:.2f}")
    verdicts = check_scaling(points)
    for v in verdicts:
        print(f"{'PASS' if v.passed else 'FAIL'}  {v.name}: {v.value:.2f} (allowed [{v.lo:g}, {v.hi:g}])")
    return EXIT_OK if all(v.passed for v in verdicts) else EXIT_CHECK_FAILED


def _threads_from(args) -> int:
    raw = getattr(args, "threads", None) or os.environ.get(THREADS_ENV) or "0"
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"threads must be an integer, got {raw!r}") from exc
    if n < 0:
        raise ConfigError("threads must be >= 0")
    return n


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "verify": cmd_verify,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError) as exc:  # ConfigError, DataError, CheckpointError included
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
