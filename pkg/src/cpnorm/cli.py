"""Command-line entry point: ``cpnorm {estimate-ranks,train,compress,eval}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields, replace

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, thread_count
from .compress import CompressionError, compress_model, fine_tune, paper_lr, select_fine_tune_lr
from .config import FIELD_TYPES, ConfigError, RunConfig, build_config, coerce, load_config_file
from .cp import estimate_rank, write_fit_curve
from .data import DataError, Dataset, load_dataset, subset, train_val_split
from .nn.functional import ShapeError
from .nn.model import build_architecture, check_input, param_count, table_shape
from .optim import DivergenceError, NonFiniteGradientError
from .train import LambdaRecorder, TrainConfig, evaluate, train, write_lambda_histogram, write_metrics


EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
CHECKPOINT_NAME = "checkpoint.ckpt"


class DivergedRun(Exception):
    """Training stopped on a non-finite value; the last good checkpoint is kept."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_run_echo(out_dir: str, cfg: RunConfig, extra: dict | None = None) -> None:
    """Config echo plus the seed and thread count every run directory carries."""
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write("\n".join(cfg.to_lines()) + "\n")
    write_json(os.path.join(out_dir, "run.json"),
               {"config": cfg.to_dict(), "seed": cfg.seed, "threads": thread_count(), **(extra or {})})


def resolve_data_dir(data_dir: str, dataset: str) -> str:
    """``data_dir/<dataset>`` when that directory exists, otherwise ``data_dir``."""
    nested = os.path.join(data_dir, dataset)
    return nested if os.path.isdir(nested) else data_dir


def load_splits(cfg: RunConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Train, validation and test splits for ``cfg`` (the subset is drawn before the split)."""
    name = cfg.resolved_dataset()
    root = resolve_data_dir(cfg.data_dir, name)
    full = subset(load_dataset(name, root, "train"), cfg.subset, seed=cfg.seed)
    train_ds, val_ds = train_val_split(full, cfg.val_fraction, seed=cfg.seed)
    return train_ds, val_ds, load_dataset(name, root, "test")


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(cfg.optimizer, cfg.lr, cfg.epochs, cfg.batch_size, cfg.seed,
                       renormalize=True, patience=cfg.patience or None)


def final_rows(history: list[dict], epoch: int | None = None) -> dict:
    """Metrics of ``epoch`` (default: the last one) keyed by split."""
    epoch = max(r["epoch"] for r in history) if epoch is None else epoch
    return {r["split"]: {"loss": r["loss"], "accuracy": r["accuracy"]} for r in history if r["epoch"] == epoch}


def mean_std(values: list[float]) -> dict:
    a = np.asarray(values, dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std(ddof=1)) if a.size > 1 else 0.0, "values": list(map(float, a))}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_estimate_ranks(cfg: RunConfig) -> dict:
    """Rank of every (selected) weight layer right after dense initialisation."""
    os.makedirs(cfg.out, exist_ok=True)
    model = build_architecture(cfg.architecture, "none", seed=cfg.seed, dtype=np.float64)
    wanted = cfg.layer_list()
    names = [l.name for l in model.weight_layers()]
    unknown = set(wanted) - set(names)
    if unknown:
        raise ConfigError(f"unknown layers {sorted(unknown)}; choose from {names}")
    table = {}
    print(f"{'layer':<8} {'size':<16} {'rank':>6} {'fit':>9}  status")
    for layer, spec in zip(model.weight_layers(), [s for s in model.specs if s.has_weight]):
        if wanted and layer.name not in wanted:
            continue
        est = estimate_rank(layer.param.params["weight"], cfg.fit_threshold, cfg.rank_step or None,
                            seed=cfg.seed, max_iters=cfg.max_iters)
        fit_at = dict(est.curve)[est.rank]
        status = "ok" if est.converged else f"threshold {cfg.fit_threshold} not reached"
        print(f"{layer.name:<8} {table_shape(spec):<16} {est.rank:>6} {fit_at:>9.6f}  {status}")
        write_fit_curve(os.path.join(cfg.out, f"fit_curve_{layer.name}.csv"), est.curve)
        table[layer.name] = {"shape": table_shape(spec), "rank": est.rank, "fit": fit_at, "reached": est.converged}
    write_json(os.path.join(cfg.out, "ranks.json"), table)
    with open(os.path.join(cfg.out, "ranks.txt"), "w") as fh:
        fh.writelines(f"rank.{k} = {v['rank']}\n" for k, v in table.items())
    write_run_echo(cfg.out, cfg, {"ranks": {k: v["rank"] for k, v in table.items()}})
    return table


def _train_one(cfg: RunConfig, out_dir: str) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    train_ds, val_ds, test_ds = load_splits(cfg)
    model = build_architecture(cfg.architecture, cfg.normalization, cfg.ranks or None,
                               cfg.init, cfg.lambda_init, cfg.seed)
    check_input(model, train_ds.sample_shape)
    ckpt = os.path.join(out_dir, CHECKPOINT_NAME)
    threads = thread_count()
    stopping = {"patience": cfg.patience, "monitor": "val accuracy"} if cfg.patience else None
    write_run_echo(out_dir, cfg, {"early_stopping": stopping})

    def meta(epoch, rows):
        return {"config": cfg.to_dict(), "epoch": epoch, "metrics": rows, "seed": cfg.seed, "threads": threads}

    test_loss, test_acc = evaluate(model, test_ds)
    save_checkpoint(ckpt, model, meta(0, [{"epoch": 0, "split": "test", "loss": test_loss, "accuracy": test_acc}]))
    recorder = LambdaRecorder(cfg.lambda_every)
    start = {l.name: l.param.params["lambdas"].copy() for l in model.cp_layers()}
    history: list[dict] = []
    metrics_path = os.path.join(out_dir, "metrics.csv")

    def on_epoch(epoch, m, rows):
        history.extend(rows)
        write_metrics(metrics_path, history)
        save_checkpoint(ckpt, m, meta(epoch, rows))

    def dump_lambdas():
        for l in model.cp_layers():
            if l.name in recorder.rows:
                recorder.write(os.path.join(out_dir, f"lambdas_{l.name}.csv"), l.name)
            write_lambda_histogram(os.path.join(out_dir, f"lambda_hist_{l.name}.csv"),
                                   start[l.name], l.param.params["lambdas"])

    try:
        result = train(model, train_ds, train_config(cfg), val_ds, test_ds,
                       on_step=recorder, on_epoch=on_epoch)
    except (DivergenceError, NonFiniteGradientError) as e:
        write_metrics(metrics_path, history)
        raise DivergedRun(f"{e}; last good checkpoint kept at {ckpt}") from e
    finally:
        dump_lambdas()
    if result.best_epoch != result.epochs_run:
        rows = [r for r in result.history if r["epoch"] == result.best_epoch]
        save_checkpoint(ckpt, model, meta(result.best_epoch, rows))
    summary = {
        "epochs_run": result.epochs_run,
        "stopped_early": result.stopped_early,
        "selected_epoch": result.best_epoch,
        "final": final_rows(result.history, result.best_epoch),
        "weights": param_count(model),
        "weights_with_bias": param_count(model, include_bias=True),
    }
    write_run_echo(out_dir, cfg, {"early_stopping": stopping, **summary})
    return summary


def cmd_train(cfg: RunConfig) -> dict:
    """Train ``cfg.seeds`` replicas (seeds ``seed, seed+1, ...``); one replica writes into ``out``."""
    if cfg.seeds == 1:
        summary = _train_one(cfg, cfg.out)
        acc = summary["final"]["test"]["accuracy"]
        print(f"test accuracy {acc:.2f}%")
        return summary
    runs = {}
    for k in range(cfg.seeds):
        s = cfg.seed + k
        runs[s] = _train_one(replace(cfg, seed=s, seeds=1), os.path.join(cfg.out, f"seed_{s}"))
    accs = [r["final"]["test"]["accuracy"] for r in runs.values()]
    summary = {"seeds": list(runs), "test_accuracy": mean_std(accs), "threads": thread_count()}
    write_json(os.path.join(cfg.out, "summary.json"), summary)
    print(f"test accuracy {summary['test_accuracy']['mean']:.2f} +- {summary['test_accuracy']['std']:.2f}% "
          f"over {cfg.seeds} seeds")
    return summary


def _checkpoint_config(cfg: RunConfig, meta: dict, explicit: set[str]) -> RunConfig:
    """Data and model settings come from the checkpoint unless given explicitly."""
    stored = meta.get("config", {})
    keep = {"architecture", "dataset", "data_dir", "normalization", "subset", "val_fraction", "seed", "batch_size"}
    values = {k: stored[k] for k in keep if k in stored and k not in explicit}
    return replace(cfg, **values)


def cmd_compress(cfg: RunConfig, checkpoint: str, explicit: set[str]) -> dict:
    """Truncate, fine-tune and write the compressed checkpoint, plan and metrics."""
    model, meta = load_checkpoint(checkpoint)
    cfg = _checkpoint_config(cfg, meta, explicit)
    os.makedirs(cfg.out, exist_ok=True)
    train_ds, val_ds, test_ds = load_splits(cfg)
    check_input(model, train_ds.sample_shape)
    model.set_dropout_rng(np.random.default_rng(np.random.SeedSequence([cfg.seed, 1])))
    before_loss, before_acc = evaluate(model, test_ds)
    compressed, plan = compress_model(model, cfg.rate)
    plan.write(os.path.join(cfg.out, "plan.json"))
    epochs = cfg.ft_epochs if cfg.rate > 0 else 0
    ft_cfg = TrainConfig(cfg.ft_optimizer, cfg.ft_lr or paper_lr(cfg.rate), epochs, cfg.batch_size,
                         cfg.seed, renormalize=True)
    lr = ft_cfg.lr
    history: list[dict] = []
    lr_scores: dict[float, float] = {}
    try:
        after_trunc = evaluate(compressed, test_ds)
        if epochs and not cfg.ft_lr and len(val_ds):
            lr, lr_scores, compressed, result = select_fine_tune_lr(
                compressed, train_ds, val_ds, ft_cfg, test_ds=test_ds)
            history = result.history
        elif epochs:
            _, result = fine_tune(compressed, train_ds, ft_cfg, val_ds, test_ds)
            history = result.history
    except (DivergenceError, NonFiniteGradientError) as e:
        raise DivergedRun(str(e)) from e
    after_loss, after_acc = evaluate(compressed, test_ds)
    write_metrics(os.path.join(cfg.out, "metrics.csv"), history)
    summary = {
        "rate": cfg.rate,
        "fine_tune": {"optimizer": cfg.ft_optimizer, "lr": lr, "epochs": epochs,
                      "val_accuracy_by_lr": {f"{k:g}": v for k, v in lr_scores.items()}},
        "weights_before": plan.weights_before,
        "weights_after": plan.weights_after,
        "realized_rate": plan.realized_rate,
        "test_before": {"loss": before_loss, "accuracy": before_acc},
        "test_truncated": {"loss": after_trunc[0], "accuracy": after_trunc[1]},
        "test_after": {"loss": after_loss, "accuracy": after_acc},
        "accuracy_drop": before_acc - after_acc,
        "source_checkpoint": os.path.abspath(checkpoint),
    }
    rows = [{"epoch": epochs, "split": "test", "loss": after_loss, "accuracy": after_acc}]
    save_checkpoint(os.path.join(cfg.out, CHECKPOINT_NAME), compressed,
                    {"config": cfg.to_dict(), "epoch": epochs, "metrics": rows, "seed": cfg.seed,
                     "threads": thread_count(), "compression": plan.to_dict()})
    write_run_echo(cfg.out, cfg, summary)
    print(f"rate {cfg.rate:.0%}: weights {plan.weights_before} -> {plan.weights_after}, "
          f"test accuracy {before_acc:.2f}% -> {after_acc:.2f}%")
    return summary


def cmd_eval(cfg: RunConfig, checkpoint: str, explicit: set[str], split: str = "test") -> dict:
    """Single deterministic pass with dropout off; prints and writes ``eval.json``."""
    model, meta = load_checkpoint(checkpoint)
    cfg = _checkpoint_config(cfg, meta, explicit)
    name = cfg.resolved_dataset()
    ds = load_dataset(name, resolve_data_dir(cfg.data_dir, name), split)
    check_input(model, ds.sample_shape)
    loss, acc = evaluate(model, ds)
    out = {"checkpoint": os.path.abspath(checkpoint), "dataset": name, "split": split,
           "n": len(ds), "loss": loss, "accuracy": acc}
    os.makedirs(cfg.out, exist_ok=True)
    write_json(os.path.join(cfg.out, "eval.json"), out)
    print(f"{name}/{split}: loss {loss:.6f} accuracy {acc:.4f}% (n={len(ds)})")
    return out


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

_COMMON = {"config", "data_dir", "out", "seed", "seeds", "preset"}


def _rank_flag(text: str) -> tuple[str, int]:
    name, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError("expected LAYER=RANK")
    try:
        return name.strip(), int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"rank for {name!r} is not an integer") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common")
    g.add_argument("--config", help="flat key = value file")
    g.add_argument("--data-dir", dest="data_dir", help="directory holding the dataset files")
    g.add_argument("--out", help="output directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--seeds", type=int, help="number of replicas (train)")
    g.add_argument("--preset", choices=("desk", "paper"))
    g.add_argument("--rank", dest="ranks", action="append", type=_rank_flag, metavar="LAYER=RANK")
    g.add_argument("-v", "--verbose", action="store_true")
    r = common.add_argument_group("run settings (override the config file)")
    for f in fields(RunConfig):
        if f.name in _COMMON or f.name == "ranks":
            continue
        r.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, metavar=FIELD_TYPES[f.name].upper())

    parser = argparse.ArgumentParser(prog="cpnorm", description="Canonical (CP) weight normalization toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("estimate-ranks", parents=[common], help="CP rank of each freshly initialised layer")
    sub.add_parser("train", parents=[common], help="train a model and export metrics, lambdas, checkpoint")
    p = sub.add_parser("compress", parents=[common], help="truncate a CP checkpoint and fine-tune")
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    return parser


def config_from_args(args: argparse.Namespace) -> tuple[RunConfig, set[str]]:
    """Merged config and the set of keys given explicitly (file or flags)."""
    file_values = load_config_file(args.config) if args.config else {}
    flags = {}
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is None or f.name == "ranks":
            continue
        flags[f.name] = coerce(f.name, value) if isinstance(value, str) else value
    if args.ranks:
        flags["ranks"] = dict(args.ranks)
    explicit = set(file_values) | set(flags)
    return build_config(file_values, flags), explicit


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, explicit = config_from_args(args)
        if args.command == "estimate-ranks":
            cmd_estimate_ranks(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "compress":
            cmd_compress(cfg, args.checkpoint, explicit)
        else:
            cmd_eval(cfg, args.checkpoint, explicit, args.split)
    except (DataError, CheckpointError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ShapeError, CompressionError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedRun as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
