"""SGD, RMSprop and Adam with the post-step CP renormalization hook."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cp import ZeroColumnError

OPTIMIZERS = ("sgd", "rmsprop", "adam")


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        self.param = name
        super().__init__(f"non-finite gradient in {name}")


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or a collapsed CP column."""


@dataclass
class OptimState:
    kind: str
    lr: float
    rms_decay: float = 0.99
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    slots: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.kind!r}; choose from {OPTIMIZERS}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


def step(state: OptimState, params, grads) -> None:
    """Apply one update in place to every ``(name, array)`` in ``params``.

    ``grads`` is a matching sequence of ``(name, array)``. Gradients are
    checked for finiteness before anything is modified.
    """
    params = list(params)
    grads = dict(grads)
    for name, p in params:
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.step_count += 1
    t = state.step_count
    lr = state.lr
    for name, p in params:
        g = grads[name]
        if state.kind == "sgd":
            p -= p.dtype.type(lr) * g
            continue
        slot = state.slots.get(name)
        if slot is None or slot["v"].shape != p.shape:
            slot = state.slots[name] = {"v": np.zeros_like(p), "m": np.zeros_like(p)}
        v, m = slot["v"], slot["m"]
        if state.kind == "rmsprop":
            a = state.rms_decay
            v *= a
            v += (1 - a) * g * g
            p -= lr * g / (np.sqrt(v) + state.eps)
        else:
            b1, b2 = state.betas
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            p -= lr * mhat / (np.sqrt(vhat) + state.eps)


def post_step_renormalize(model):
    """Project every CP factor column of ``model`` back to unit norm, in place."""
    try:
        model.renormalize()
    except ZeroColumnError as e:
        raise DivergenceError(str(e)) from e
    return model
