"""Weight reparametrizations: canonical (CP) normalization and weight normalization.

CPNorm builds a layer weight as

    W = sigma * sum_r lambda_r * (a_r/|a_r|) o (b_r/|b_r|) o (c_r/|c_r|) ...

with one factor matrix per weight mode. Weight normalization is the
single-length baseline ``w = g * v / |v|``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..cp import CpForm, ZeroColumnError, cp_reconstruct, renormalize
from ..tensor import khatri_rao


@dataclass
class CpNormParam:
    cp: CpForm
    sigma: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.sigma):
            raise ValueError("sigma must be finite")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.cp.shape

    @property
    def rank(self) -> int:
        return self.cp.rank

    def renormalized(self, layer: str | None = None) -> "CpNormParam":
        return CpNormParam(renormalize(self.cp, layer=layer), self.sigma)


@dataclass
class CpNormGrads:
    sigma: float
    lambdas: np.ndarray
    factors: list[np.ndarray]


@dataclass
class WeightNormParam:
    v: np.ndarray
    g: float

    def __post_init__(self):
        if not np.any(self.v):
            raise ValueError("weight-norm direction v must not be all zero")


def _unit_factors(cp: CpForm, layer: str | None = None):
    units, norms = [], []
    for k, f in enumerate(cp.factors):
        n = np.linalg.norm(f, axis=0)
        zero = np.flatnonzero(n == 0)
        if zero.size:
            raise ZeroColumnError(k, int(zero[0]), layer)
        units.append(f / n)
        norms.append(n)
    return units, norms


def _mttkrp_all(t: np.ndarray, units: list[np.ndarray]) -> list[np.ndarray]:
    """``out[k][:, r]``: ``t`` contracted with column ``r`` of every factor except mode ``k``.

    For order >= 3 the trailing modes are reached through one contraction
    with mode 0, so no Khatri-Rao product larger than the mode-0 one is formed.
    """
    n = len(units)
    rank = units[0].shape[1]
    if n == 1:
        return [np.repeat(t.reshape(-1, 1), rank, axis=1)]
    if n == 2:
        return [t @ units[1], t.T @ units[0]]
    flat = t.reshape(t.shape[0], -1)
    out = [flat @ khatri_rao(units[1:])]
    # z[r, i_1, ..., i_{n-1}] = sum_i0 units[0][i0, r] t[i0, i_1, ...]
    z = (units[0].T @ flat).reshape((rank,) + t.shape[1:])
    for k in range(1, n):
        acc = z
        for j in reversed(range(1, n)):
            if j == k:
                continue
            col = units[j].T.reshape((rank,) + tuple(units[j].shape[0] if a == j else 1 for a in range(1, n)))
            acc = np.sum(acc * col, axis=j, keepdims=True)
        out.append(acc.reshape(rank, -1).T)
    return out


def cpnorm_weight(p: CpNormParam, layer: str | None = None) -> np.ndarray:
    """Full weight tensor of a CPNorm parameter block."""
    units, _ = _unit_factors(p.cp, layer)
    dtype = p.cp.lambdas.dtype
    return dtype.type(p.sigma) * cp_reconstruct(CpForm(units, p.cp.lambdas))


def cpnorm_backward(p: CpNormParam, grad_w: np.ndarray, layer: str | None = None) -> CpNormGrads:
    """Gradients of ``<grad_w, W>`` w.r.t. sigma, the lambdas and every factor."""
    if grad_w.shape != p.shape:
        raise ValueError(f"gradient shape {grad_w.shape} does not match weight shape {p.shape}")
    units, norms = _unit_factors(p.cp, layer)
    n = len(units)
    sigma = p.cp.lambdas.dtype.type(p.sigma)
    lam = p.cp.lambdas
    mttkrp = _mttkrp_all(grad_w, units)
    # <outer(unit columns r), grad_w>
    term = np.sum(units[0] * mttkrp[0], axis=0)
    grad_sigma = float(np.dot(lam, term))
    grad_lam = sigma * term
    grad_factors = []
    for k in range(n):
        g_unit = mttkrp[k] * (sigma * lam)
        radial = np.sum(units[k] * g_unit, axis=0)
        grad_factors.append((g_unit - units[k] * radial) / norms[k])
    return CpNormGrads(grad_sigma, grad_lam, grad_factors)


def weightnorm_weight(p: WeightNormParam) -> np.ndarray:
    norm = np.linalg.norm(p.v.ravel())
    if norm == 0:
        raise ValueError("weight-norm direction v is zero")
    return p.v * (p.v.dtype.type(p.g) / norm)


def weightnorm_backward(p: WeightNormParam, grad_w: np.ndarray) -> tuple[float, np.ndarray]:
    """Returns ``(grad_g, grad_v)``."""
    if grad_w.shape != p.v.shape:
        raise ValueError(f"gradient shape {grad_w.shape} does not match weight shape {p.v.shape}")
    norm = np.linalg.norm(p.v.ravel())
    unit = p.v / norm
    grad_g = float(np.sum(unit * grad_w))
    grad_v = (p.v.dtype.type(p.g) / norm) * (grad_w - unit * grad_g)
    return grad_g, grad_v
