"""Training and evaluation loops."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import Dataset, batch_iter
from .nn.functional import softmax_cross_entropy
from .nn.model import Model
from .optim import DivergenceError, OptimState, post_step_renormalize, step

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    optimizer: str = "rmsprop"
    lr: float = 1e-3
    epochs: int = 5
    batch_size: int = 64
    seed: int = 0
    renormalize: bool = True
    # stop after this many epochs without validation-accuracy improvement, then
    # restore the parameters of the best validation epoch
    patience: int | None = None


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    epochs_run: int = 0
    stopped_early: bool = False
    # epoch whose parameters the model holds on return
    best_epoch: int = 0


def evaluate(model: Model, ds: Dataset, batch_size: int = 500) -> tuple[float, float]:
    """Mean loss and accuracy (in percent) with dropout disabled."""
    total_loss, correct = 0.0, 0
    for x, y in batch_iter(ds, batch_size):
        logits = model.forward(x, train=False)
        loss, _ = softmax_cross_entropy(logits, y)
        total_loss += loss * len(y)
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
    n = len(ds)
    return total_loss / n, 100.0 * correct / n


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def train_step(model: Model, state: OptimState, x, y, renorm: bool = True) -> tuple[float, float]:
    """One optimizer step on a batch; returns ``(loss, accuracy%)`` before the update."""
    logits = model.forward(x, train=True)
    loss, grad = softmax_cross_entropy(logits, y)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss at step {state.step_count + 1}")
    model.backward(grad)
    step(state, model.parameters(), model.gradients())
    if renorm:
        post_step_renormalize(model)
    acc = 100.0 * float(np.mean(np.argmax(logits, axis=1) == y))
    return loss, acc


def train(
    model: Model,
    train_ds: Dataset,
    config: TrainConfig,
    val_ds: Dataset | None = None,
    test_ds: Dataset | None = None,
    on_step: Callable[[int, Model], None] | None = None,
    on_epoch: Callable[[int, Model, list[dict]], None] | None = None,
    state: OptimState | None = None,
) -> TrainResult:
    """Mini-batch training with per-epoch train/val/test metrics.

    ``on_step(step, model)`` runs after each update (and once with step 0
    before training); ``on_epoch`` receives the epoch's metric rows.
    """
    state = state or OptimState(config.optimizer, config.lr)
    result = TrainResult()
    if on_step is not None:
        on_step(0, model)
    best_val, stale, best_params = -1.0, 0, None
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        losses, accs, sizes = [], [], []
        for x, y in batch_iter(train_ds, config.batch_size, shuffle=True, seed=epoch_seed(config.seed, epoch)):
            loss, acc = train_step(model, state, x, y, config.renormalize)
            losses.append(loss)
            accs.append(acc)
            sizes.append(len(y))
            result.step_losses.append(loss)
            if on_step is not None:
                on_step(state.step_count, model)
        w = np.asarray(sizes, dtype=np.float64)
        rows = [{"epoch": epoch, "split": "train",
                 "loss": float(np.dot(losses, w) / w.sum()), "accuracy": float(np.dot(accs, w) / w.sum())}]
        for ds in (val_ds, test_ds):
            if ds is not None:
                l, a = evaluate(model, ds)
                rows.append({"epoch": epoch, "split": ds.split, "loss": l, "accuracy": a})
        result.history.extend(rows)
        result.epochs_run = epoch
        logger.info("epoch %d (%.1fs): %s", epoch, time.perf_counter() - t0,
                    ", ".join(f"{r['split']} loss {r['loss']:.4f} acc {r['accuracy']:.2f}" for r in rows))
        if on_epoch is not None:
            on_epoch(epoch, model, rows)
        if config.patience is not None and val_ds is not None:
            val_acc = next(r["accuracy"] for r in rows if r["split"] == val_ds.split)
            if val_acc > best_val:
                best_val, stale = val_acc, 0
                result.best_epoch = epoch
                best_params = [a.copy() for _, a in model.parameters()]
            else:
                stale += 1
                if stale >= config.patience:
                    result.stopped_early = True
                    break
        else:
            result.best_epoch = epoch
    if best_params is not None and result.best_epoch != result.epochs_run:
        for (_, a), b in zip(model.parameters(), best_params):
            a[...] = b
        logger.info("restored parameters of epoch %d (best validation accuracy)", result.best_epoch)
    return result


def write_metrics(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "split", "loss", "accuracy"])
        for r in rows:
            w.writerow([r["epoch"], r["split"], repr(float(r["loss"])), repr(float(r["accuracy"]))])


class LambdaRecorder:
    """Collects sigma and every lambda of each CP layer after each step."""

    def __init__(self, every: int = 1):
        self.every = every
        self.rows: dict[str, list[list[float]]] = {}

    def __call__(self, step_idx: int, model: Model) -> None:
        if step_idx % self.every:
            return
        for layer in model.cp_layers():
            p = layer.param.params
            row = [step_idx, float(p["sigma"][0])] + [float(v) for v in p["lambdas"]]
            self.rows.setdefault(layer.name, []).append(row)

    def write(self, path, layer: str) -> None:
        rows = self.rows[layer]
        rank = len(rows[0]) - 2
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "sigma"] + [f"lambda_{i}" for i in range(rank)])
            for r in rows:
                w.writerow([int(r[0])] + [repr(v) for v in r[1:]])


def write_lambda_histogram(path, start: np.ndarray, end: np.ndarray, bins: int = 30) -> None:
    """Binned counts of the initial and final lambdas over a shared range."""
    lo = float(min(start.min(), end.min()))
    hi = float(max(start.max(), end.max()))
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    c0, _ = np.histogram(start, edges)
    c1, _ = np.histogram(end, edges)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_left", "bin_right", "count_start", "count_end"])
        for i in range(bins):
            w.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), int(c0[i]), int(c1[i])])
