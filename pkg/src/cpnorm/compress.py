"""Truncation compression of CPNorm models and the fine-tuning stage.

Rank terms are ranked by ``|lambda_r|`` and the smallest are dropped; the
remaining factor columns and lambdas keep their original index order, so
keeping everything reproduces the input exactly.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .cp import CpForm
from .data import Dataset
from .nn.model import Model, param_count
from .nn.reparam import CpNormParam
from .train import TrainConfig, TrainResult, evaluate, train

logger = logging.getLogger(__name__)

# learning rate per compression rate, heavier truncation gets larger steps
PAPER_FINE_TUNE_LR = {0.25: 1e-4, 0.5: 1e-3, 0.75: 1e-2}


class CompressionError(ValueError):
    pass


def kept_count(rank: int, keep_fraction: float) -> int:
    """Number of retained terms: ``keep_fraction * rank`` rounded half up, at least one."""
    if not 0 < keep_fraction <= 1:
        raise CompressionError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    # the small offset absorbs representation error such as 1 - 0.1 = 0.9000000000000000222
    return max(1, min(rank, math.floor(keep_fraction * rank + 0.5 + 1e-9)))


def select_terms(lambdas: np.ndarray, count: int) -> np.ndarray:
    """Indices of the ``count`` largest ``|lambda|`` (ties to the lower index), ascending."""
    order = np.argsort(-np.abs(np.asarray(lambdas)), kind="stable")
    return np.sort(order[:count])


def truncate(p: CpNormParam, keep_fraction: float) -> CpNormParam:
    """Keep the largest-magnitude rank terms of ``p``; sigma is untouched."""
    idx = select_terms(p.cp.lambdas, kept_count(p.rank, keep_fraction))
    cp = CpForm([f[:, idx].copy() for f in p.cp.factors], p.cp.lambdas[idx].copy())
    return CpNormParam(cp, p.sigma)


@dataclass
class LayerPlan:
    name: str
    original_rank: int
    keep_fraction: float
    kept_indices: list[int]
    lambdas_retained: list[float]
    lambdas_discarded: list[float]
    weights_before: int
    weights_after: int


@dataclass
class CompressionPlan:
    rate: float
    layers: list[LayerPlan] = field(default_factory=list)
    weights_before: int = 0
    weights_after: int = 0
    weights_before_with_bias: int = 0
    weights_after_with_bias: int = 0
    # per-layer keep fractions that differ from ``1 - rate``
    overrides: dict[str, float] = field(default_factory=dict)

    @property
    def realized_rate(self) -> float:
        """Fraction of weights (biases excluded) removed."""
        return 1.0 - self.weights_after / self.weights_before

    def to_dict(self) -> dict:
        d = asdict(self)
        d["realized_rate"] = self.realized_rate
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CompressionPlan":
        d = dict(d)
        d.pop("realized_rate", None)
        d["layers"] = [LayerPlan(**l) for l in d["layers"]]
        return cls(**d)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def compress_model(
    model: Model, rate: float, overrides: dict[str, float] | None = None
) -> tuple[Model, CompressionPlan]:
    """Truncate every CP layer of a copy of ``model`` to ``1 - rate`` of its rank.

    ``rate`` is the fraction of rank terms removed; ``overrides`` maps layer
    names to their own keep fractions.
    """
    if not 0 <= rate < 1:
        raise CompressionError(f"compression rate must be in [0, 1), got {rate}")
    if not model.cp_layers():
        raise CompressionError("model has no CP-normalized layers to truncate")
    overrides = dict(overrides or {})
    unknown = set(overrides) - {l.name for l in model.cp_layers()}
    if unknown:
        raise CompressionError(f"overrides name non-CP layers: {sorted(unknown)}")
    out = copy.deepcopy(model)
    plan = CompressionPlan(
        rate=rate,
        weights_before=param_count(model),
        weights_before_with_bias=param_count(model, include_bias=True),
        overrides=overrides,
    )
    for layer in out.cp_layers():
        keep = overrides.get(layer.name, 1.0 - rate)
        p = layer.param.as_param()
        before = layer.weight_count()
        idx = select_terms(p.cp.lambdas, kept_count(p.rank, keep))
        dropped = np.setdiff1d(np.arange(p.rank), idx)
        layer.param.set_param(truncate(p, keep))
        plan.layers.append(LayerPlan(
            name=layer.name,
            original_rank=p.rank,
            keep_fraction=keep,
            kept_indices=[int(i) for i in idx],
            lambdas_retained=[float(v) for v in p.cp.lambdas[idx]],
            lambdas_discarded=[float(v) for v in p.cp.lambdas[dropped]],
            weights_before=before,
            weights_after=layer.weight_count(),
        ))
    if out.specs is not None:
        out.specs = out.current_specs()
    plan.weights_after = param_count(out)
    plan.weights_after_with_bias = param_count(out, include_bias=True)
    logger.info("compressed %.0f%%: %d -> %d weights", 100 * rate, plan.weights_before, plan.weights_after)
    return out, plan


def paper_lr(rate: float) -> float:
    """Fine-tuning step size following the 25/50/75% pattern (smaller rates use the 25% value)."""
    for r in sorted(PAPER_FINE_TUNE_LR):
        if rate <= r + 1e-12:
            return PAPER_FINE_TUNE_LR[r]
    return PAPER_FINE_TUNE_LR[max(PAPER_FINE_TUNE_LR)]


def fine_tune(
    model: Model,
    train_ds: Dataset,
    config: TrainConfig,
    val_ds: Dataset | None = None,
    test_ds: Dataset | None = None,
) -> tuple[Model, TrainResult]:
    """Train the compressed parametrization in place (renormalization hook on)."""
    config = replace(config, renormalize=True)
    result = train(model, train_ds, config, val_ds, test_ds)
    return model, result


def select_fine_tune_lr(
    model: Model,
    train_ds: Dataset,
    val_ds: Dataset,
    config: TrainConfig,
    candidates=tuple(sorted(PAPER_FINE_TUNE_LR.values())),
    test_ds: Dataset | None = None,
) -> tuple[float, dict[float, float], Model, TrainResult]:
    """Fine-tune a copy per candidate rate and keep the one with best validation accuracy.

    Ties go to the smaller learning rate. Returns the chosen rate, the
    validation score per rate, and the fine-tuned copy with its training result.
    """
    scores, trials = {}, {}
    for lr in sorted(candidates):
        trial = copy.deepcopy(model)
        _, result = fine_tune(trial, train_ds, replace(config, lr=lr), val_ds, test_ds)
        scores[lr] = evaluate(trial, val_ds)[1]
        trials[lr] = (trial, result)
        logger.info("fine-tune lr %g: val acc %.2f", lr, scores[lr])
    best = max(sorted(scores), key=lambda lr: scores[lr])
    return best, scores, *trials[best]
