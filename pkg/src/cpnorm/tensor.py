"""Dense tensor primitives: outer products, matricization, Khatri-Rao, norms.

Tensors are plain :class:`numpy.ndarray` values. Every function here returns a
freshly allocated array, never a view of its input.

Unfolding follows the Kolda & Bader convention: the mode-``n`` unfolding of a
tensor with shape ``(d_0, ..., d_{N-1})`` is a ``d_n x prod(d_k, k != n)``
matrix whose column index runs over the remaining modes with the *lowest*
remaining mode varying fastest. With that convention

    unfold(X, n) == A_n @ khatri_rao([A_{N-1}, ..., A_{n+1}, A_{n-1}, ..., A_0]).T

for a CP tensor ``X = [A_0, ..., A_{N-1}]``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np


def outer_product(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Outer product ``v_0 o v_1 o ... o v_{n-1}`` of one or more vectors."""
    if len(vectors) == 0:
        raise ValueError("outer_product needs at least one vector")
    vecs = [np.asarray(v).ravel() for v in vectors]
    for k, v in enumerate(vecs):
        if v.size == 0:
            raise ValueError(f"vector {k} is empty")
    out = vecs[0].copy()
    for v in vecs[1:]:
        out = np.multiply.outer(out, v)
    return out


def unfold(t: np.ndarray, mode: int) -> np.ndarray:
    """Mode-``mode`` matricization of ``t`` (Kolda ordering)."""
    t = np.asarray(t)
    if not 0 <= mode < t.ndim:
        raise ValueError(f"mode {mode} out of range for order-{t.ndim} tensor")
    moved = np.moveaxis(t, mode, 0)
    return np.reshape(moved, (t.shape[mode], -1), order="F").copy(order="C")


def fold(m: np.ndarray, mode: int, shape: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`unfold` for the same ``mode`` and ``shape``."""
    m = np.asarray(m)
    shape = tuple(int(d) for d in shape)
    if not 0 <= mode < len(shape):
        raise ValueError(f"mode {mode} out of range for order-{len(shape)} shape")
    rest = shape[:mode] + shape[mode + 1:]
    expected = (shape[mode], int(np.prod(rest, dtype=np.int64)))
    if m.ndim != 2 or m.shape != expected:
        raise ValueError(
            f"matrix of shape {m.shape} cannot be folded into {shape} along mode {mode}; "
            f"expected {expected}"
        )
    moved = np.reshape(m, (shape[mode],) + rest, order="F")
    return np.ascontiguousarray(np.moveaxis(moved, 0, mode))


def khatri_rao(matrices: Sequence[np.ndarray]) -> np.ndarray:
    """Column-wise Kronecker product, first matrix varying slowest.

    Column ``r`` of the result is ``kron(M_0[:, r], M_1[:, r], ...)``.
    """
    if len(matrices) == 0:
        raise ValueError("khatri_rao needs at least one matrix")
    mats = [np.asarray(m) for m in matrices]
    rank = mats[0].shape[1]
    for k, m in enumerate(mats):
        if m.ndim != 2:
            raise ValueError(f"matrix {k} is not 2-D")
        if m.shape[1] != rank:
            raise ValueError(
                f"column count mismatch: matrix 0 has {rank}, matrix {k} has {m.shape[1]}"
            )
    out = mats[0].copy()
    for m in mats[1:]:
        out = (out[:, None, :] * m[None, :, :]).reshape(-1, rank)
    return out


def frobenius_norm(t: np.ndarray) -> float:
    """Square root of the sum of squared entries."""
    t = np.asarray(t, dtype=np.float64)
    return float(np.sqrt(np.sum(t * t)))
