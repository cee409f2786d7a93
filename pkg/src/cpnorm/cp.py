"""CP (CANDECOMP/PARAFAC) decompositions.

A :class:`CpForm` stores the tensor ``sum_r lambdas[r] * a_r o b_r o c_r ...``
with one factor matrix per mode (column ``r`` of factor ``k`` is the mode-``k``
vector of rank term ``r``). The module provides reconstruction, the relative
fit metric, ALS, greedy tensor power iteration, rank estimation and random
initialisation of the decomposed form.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg

from .tensor import frobenius_norm, khatri_rao, unfold

logger = logging.getLogger(__name__)

# Relative singular-value cutoff for the ALS normal equations.
PINV_RCOND = 1e-10
# Norm deviation from 1 (in machine epsilons of the factor dtype) below which
# renormalize leaves a column untouched, which keeps it exactly idempotent.
_UNIT_ULPS = 4

FACTOR_DISTS = ("kaiming_normal", "kaiming_uniform")
LAMBDA_INITS = ("ones", "standard_normal")


class ZeroColumnError(ValueError):
    """A factor column has zero norm and cannot be normalised."""

    def __init__(self, mode: int, rank_index: int, layer: str | None = None):
        self.mode = mode
        self.rank_index = rank_index
        self.layer = layer
        where = f"layer {layer!r}, " if layer is not None else ""
        super().__init__(f"zero factor column at {where}mode {mode}, rank index {rank_index}")


@dataclass
class CpForm:
    """Factor matrices plus the signed rank-scale vector."""

    factors: list[np.ndarray]
    lambdas: np.ndarray

    def __post_init__(self):
        self.factors = [np.asarray(f) for f in self.factors]
        self.lambdas = np.asarray(self.lambdas).ravel()
        if not self.factors:
            raise ValueError("CpForm needs at least one factor matrix")
        rank = self.lambdas.size
        if rank < 1:
            raise ValueError("CpForm rank must be >= 1")
        for k, f in enumerate(self.factors):
            if f.ndim != 2 or f.shape[1] != rank or f.shape[0] < 1:
                raise ValueError(
                    f"factor {k} has shape {f.shape}; expected (d_{k}, {rank})"
                )

    @property
    def rank(self) -> int:
        return self.lambdas.size

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(f.shape[0] for f in self.factors)

    @property
    def order(self) -> int:
        return len(self.factors)

    def copy(self) -> "CpForm":
        return CpForm([f.copy() for f in self.factors], self.lambdas.copy())

    def astype(self, dtype) -> "CpForm":
        return CpForm([f.astype(dtype) for f in self.factors], self.lambdas.astype(dtype))

    def column_norms(self) -> list[np.ndarray]:
        return [np.linalg.norm(f, axis=0) for f in self.factors]


@dataclass
class FitReport:
    rank: int
    fit: float
    iterations: int
    converged: bool
    history: list[float] = field(default_factory=list)
    # cp_power only: residual vanished before all terms were extracted
    exhausted: bool = False


@dataclass
class RankEstimate:
    rank: int
    curve: list[tuple[int, float]]
    converged: bool


def cp_reconstruct(cp: CpForm) -> np.ndarray:
    """Dense tensor ``sum_r lambda_r * outer(columns r)``."""
    first = cp.factors[0] * cp.lambdas[None, :]
    if cp.order == 1:
        return first.sum(axis=1)
    # khatri_rao puts its first argument slowest, so the trailing modes come out in C order.
    rest = khatri_rao(cp.factors[1:])
    return (first @ rest.T).reshape(cp.shape)


def fit(target: np.ndarray, cp: CpForm) -> float:
    """``1 - ||target - reconstruction|| / ||target||``."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != cp.shape:
        raise ValueError(f"target shape {target.shape} does not match CP shape {cp.shape}")
    norm = frobenius_norm(target)
    if norm == 0.0:
        raise ValueError("fit is undefined for an all-zero target")
    return 1.0 - frobenius_norm(target - cp_reconstruct(cp)) / norm


def canonical_signs(cp: CpForm) -> CpForm:
    """Flip columns whose largest-magnitude entry is negative, moving the sign into lambda."""
    out = cp.copy()
    for f in out.factors:
        idx = np.argmax(np.abs(f), axis=0)
        neg = f[idx, np.arange(f.shape[1])] < 0
        f[:, neg] *= -1
        out.lambdas[neg] *= -1
    return out


def renormalize(cp: CpForm, absorb: bool = False, layer: str | None = None) -> CpForm:
    """Scale every factor column to unit Euclidean norm.

    With ``absorb=False`` (the default) lambda is left untouched; ``absorb=True``
    multiplies the removed norms into lambda so the plain CP reconstruction is
    preserved as well.
    """
    factors = []
    lambdas = cp.lambdas.copy()
    for k, f in enumerate(cp.factors):
        norms = np.linalg.norm(f, axis=0)
        zero = np.flatnonzero(norms == 0)
        if zero.size:
            raise ZeroColumnError(k, int(zero[0]), layer)
        tol = _UNIT_ULPS * np.finfo(norms.dtype).eps
        norms = np.where(np.abs(norms - 1.0) <= tol, 1.0, norms)
        factors.append(f / norms[None, :].astype(f.dtype))
        if absorb:
            lambdas = lambdas * norms.astype(lambdas.dtype)
    return CpForm(factors, lambdas)


def random_cp(
    shape: Sequence[int],
    rank: int,
    factor_dist: str = "kaiming_normal",
    lambda_init: str = "ones",
    seed: int | np.random.Generator | None = None,
    dtype=np.float64,
) -> CpForm:
    """Populate a CP form directly with random values.

    Factor ``k`` is drawn Kaiming-style (ReLU gain) with fan-in equal to its
    row count ``d_k``. Columns are not normalised.
    """
    if factor_dist not in FACTOR_DISTS:
        raise ValueError(f"unknown factor distribution {factor_dist!r}; choose from {FACTOR_DISTS}")
    if lambda_init not in LAMBDA_INITS:
        raise ValueError(f"unknown lambda init {lambda_init!r}; choose from {LAMBDA_INITS}")
    if rank < 1:
        raise ValueError("rank must be >= 1")
    rng = np.random.default_rng(seed)
    gain = np.sqrt(2.0)
    factors = []
    for d in shape:
        std = gain / np.sqrt(d)
        if factor_dist == "kaiming_normal":
            f = rng.normal(0.0, std, size=(d, rank))
        else:
            bound = np.sqrt(3.0) * std
            f = rng.uniform(-bound, bound, size=(d, rank))
        factors.append(f.astype(dtype))
    if lambda_init == "ones":
        lambdas = np.ones(rank, dtype=dtype)
    else:
        lambdas = rng.standard_normal(rank).astype(dtype)
    return CpForm(factors, lambdas)


# ---------------------------------------------------------------------------
# ALS
# ---------------------------------------------------------------------------


def _solve_normal(mttkrp: np.ndarray, gram: np.ndarray) -> np.ndarray:
    """``mttkrp @ pinv(gram)`` for a symmetric PSD gram matrix.

    Tries a Cholesky solve first; when the system is numerically rank
    deficient falls back to an eigen-decomposition pseudo-inverse that drops
    eigenvalues below ``PINV_RCOND * max``.
    """
    w = None
    try:
        c = scipy.linalg.cho_factor(gram, check_finite=False)
        diag = np.abs(np.diag(c[0]))
        # squared ratio of Cholesky diagonals bounds the conditioning from below
        if diag.min() ** 2 > PINV_RCOND * diag.max() ** 2:
            return scipy.linalg.cho_solve(c, mttkrp.T, check_finite=False).T
    except np.linalg.LinAlgError:
        pass
    w, q = np.linalg.eigh(gram)
    keep = w > PINV_RCOND * max(w.max(), 0.0)
    inv = (q[:, keep] / w[keep]) @ q[:, keep].T
    return mttkrp @ inv


def _others(factors: list[np.ndarray], mode: int) -> list[np.ndarray]:
    """Factors of all modes but ``mode`` in the order matching :func:`unfold`."""
    return [factors[j] for j in reversed(range(len(factors))) if j != mode]


def svd_bases(target: np.ndarray, rank: int | None = None) -> list[np.ndarray]:
    """Leading left singular vectors of every unfolding of ``target``."""
    bases = []
    for k in range(target.ndim):
        u, _, _ = np.linalg.svd(unfold(target, k), full_matrices=False)
        if rank is not None:
            u = u[:, :rank]
        bases.append(u)
    return bases


def _initial_factors(target, rank, init, rng, bases=None) -> list[np.ndarray]:
    if isinstance(init, CpForm):
        if init.shape != target.shape or init.rank != rank:
            raise ValueError("initial CpForm does not match target shape/rank")
        return [f.astype(np.float64) for f in init.factors]
    if init == "random":
        return [rng.standard_normal((d, rank)) for d in target.shape]
    if init != "svd":
        raise ValueError(f"unknown ALS init {init!r}")
    if bases is None:
        bases = svd_bases(target, rank)
    factors = []
    for d, u in zip(target.shape, bases):
        take = min(rank, u.shape[1])
        f = np.empty((d, rank))
        f[:, :take] = u[:, :take]
        if take < rank:
            f[:, take:] = rng.standard_normal((d, rank - take)) / np.sqrt(d)
        factors.append(f)
    return factors


def cp_als(
    target: np.ndarray,
    rank: int,
    max_iters: int = 100,
    stop_tol: float = 1e-8,
    seed: int | None = 0,
    init: str | CpForm = "svd",
    bases: list[np.ndarray] | None = None,
) -> tuple[CpForm, FitReport]:
    """CP decomposition by alternating least squares.

    Parameters
    ----------
    target : array_like
        Tensor of any order >= 1.
    rank : int
        Number of rank-one terms.
    max_iters : int
        Maximum number of full sweeps over all modes.
    stop_tol : float
        Stop once a sweep improves the fit by less than this.
    seed : int, optional
        Seed for the random part of the initialisation.
    init : {"svd", "random"} or CpForm
        ``"svd"`` takes the leading left singular vectors of each unfolding
        (padded with Gaussian columns when ``rank`` exceeds the mode size).
    bases : list of ndarray, optional
        Precomputed :func:`svd_bases`, reused across calls on one target.

    Returns
    -------
    (CpForm, FitReport)
        Columns have unit norm, norms live in the signed lambdas.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    x = np.asarray(target, dtype=np.float64)
    norm_x = frobenius_norm(x)
    if norm_x == 0.0:
        raise ValueError("cannot decompose an all-zero tensor")
    rng = np.random.default_rng(seed)
    factors = _initial_factors(x, rank, init, rng, bases)
    n = x.ndim
    lambdas = np.ones(rank)
    for k in range(n):
        nrm = np.linalg.norm(factors[k], axis=0)
        nrm[nrm == 0] = 1.0
        factors[k] = factors[k] / nrm

    if n == 1:
        # a vector is its own rank-one term; extra terms get zero weight
        cp = CpForm([np.zeros((x.size, rank))], np.zeros(rank))
        cp.factors[0][:, 0] = x / norm_x
        cp.lambdas[0] = norm_x
        cp.factors[0][0, 1:] = 1.0
        return canonical_signs(cp), FitReport(rank, 1.0, 1, True, [1.0])

    unfoldings = [unfold(x, k) for k in range(n)]
    grams = [f.T @ f for f in factors]
    history: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        for k in range(n):
            gram = np.ones((rank, rank))
            for j in range(n):
                if j != k:
                    gram *= grams[j]
            m = unfoldings[k] @ khatri_rao(_others(factors, k))
            a = _solve_normal(m, gram)
            lambdas = np.linalg.norm(a, axis=0)
            safe = np.where(lambdas > 0, lambdas, 1.0)
            factors[k] = a / safe
            grams[k] = factors[k].T @ factors[k]
        # last mode was solved against unit-norm others, so lambdas carry the scale
        recon = (factors[0] * lambdas) @ khatri_rao(_others(factors, 0)).T
        f = 1.0 - frobenius_norm(unfoldings[0] - recon) / norm_x
        history.append(f)
        if len(history) > 1 and history[-1] - history[-2] < stop_tol:
            converged = True
            break
        if f >= 1.0 - 1e-15:
            converged = True
            break
    cp = canonical_signs(CpForm(factors, lambdas))
    final = fit(x, cp)
    logger.debug("cp_als rank=%d iters=%d fit=%.6f", rank, it, final)
    return cp, FitReport(rank, final, it, converged, history)


# ---------------------------------------------------------------------------
# Tensor power method
# ---------------------------------------------------------------------------


def _contract_except(t: np.ndarray, vecs: list[np.ndarray], skip: int) -> np.ndarray:
    """Contract ``t`` with ``vecs[j]`` along every mode ``j != skip``."""
    out = t
    for j in reversed(range(t.ndim)):
        if j != skip:
            out = np.tensordot(out, vecs[j], axes=([j], [0]))
    return out


def cp_power(
    target: np.ndarray,
    rank: int,
    inner_iters: int = 50,
    seed: int | None = 0,
) -> tuple[CpForm, FitReport]:
    """Greedy rank-one deflation with alternating power iterations.

    For each of the ``rank`` terms, random unit vectors are refined by
    ``inner_iters`` rounds of contracting the current residual against all
    but one vector; lambda is the signed final full contraction and the term
    is subtracted from the residual before the next one is fitted.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    x = np.asarray(target, dtype=np.float64)
    norm_x = frobenius_norm(x)
    if norm_x == 0.0:
        raise ValueError("cannot decompose an all-zero tensor")
    rng = np.random.default_rng(seed)
    n = x.ndim
    residual = x.copy()
    factors = [np.empty((d, rank)) for d in x.shape]
    lambdas = np.zeros(rank)
    exhausted = False
    tiny = np.finfo(np.float64).eps * norm_x
    for r in range(rank):
        if frobenius_norm(residual) <= tiny:
            exhausted = True
        vecs = []
        for d in x.shape:
            v = rng.standard_normal(d)
            vecs.append(v / np.linalg.norm(v))
        if exhausted:
            for k in range(n):
                factors[k][:, r] = vecs[k]
            continue
        for _ in range(max(inner_iters, 1)):
            for k in range(n):
                v = _contract_except(residual, vecs, k)
                nv = np.linalg.norm(v)
                if nv == 0.0:
                    # orthogonal start; draw a fresh direction
                    v = rng.standard_normal(x.shape[k])
                    nv = np.linalg.norm(v)
                vecs[k] = v / nv
        lam = float(np.dot(_contract_except(residual, vecs, n - 1), vecs[n - 1]))
        for k in range(n):
            factors[k][:, r] = vecs[k]
        lambdas[r] = lam
        residual -= lam * _outer(vecs)
    cp = canonical_signs(CpForm(factors, lambdas))
    report = FitReport(rank, fit(x, cp), rank * inner_iters, not exhausted, exhausted=exhausted)
    if exhausted:
        logger.info("cp_power: residual vanished before extracting %d terms", rank)
    return cp, report


def _outer(vecs: list[np.ndarray]) -> np.ndarray:
    out = vecs[0]
    for v in vecs[1:]:
        out = np.multiply.outer(out, v)
    return out


# ---------------------------------------------------------------------------
# Rank estimation
# ---------------------------------------------------------------------------


def max_cp_rank(shape: Sequence[int]) -> int:
    """Trivial CP-rank upper bound: product of all but the largest dimension."""
    dims = sorted(int(d) for d in shape)
    return int(np.prod(dims[:-1], dtype=np.int64)) if len(dims) > 1 else 1


def estimate_rank(
    target: np.ndarray,
    fit_threshold: float = 0.999,
    rank_step: int | None = None,
    max_rank: int | None = None,
    seed: int | None = 0,
    max_iters: int = 100,
    stop_tol: float = 1e-8,
) -> RankEstimate:
    """Smallest CP rank whose ALS fit reaches ``fit_threshold``.

    Probes ranks ``step, 2*step, ...`` (and ``max_rank``) until the threshold
    is met, then bisects the last interval. The returned curve lists every
    probed ``(rank, fit)`` pair sorted by rank.
    """
    if not 0.0 < fit_threshold <= 1.0:
        raise ValueError("fit_threshold must lie in (0, 1]")
    x = np.asarray(target, dtype=np.float64)
    if max_rank is None:
        max_rank = max_cp_rank(x.shape)
    if rank_step is None:
        rank_step = max(1, max_rank // 32)
    if rank_step < 1 or max_rank < 1:
        raise ValueError("rank_step and max_rank must be >= 1")
    bases = svd_bases(x, max_rank)
    fits: dict[int, float] = {}

    def probe(r: int) -> bool:
        _, rep = cp_als(x, r, max_iters=max_iters, stop_tol=stop_tol, seed=seed, bases=bases)
        fits[r] = rep.fit
        logger.info("rank probe r=%d fit=%.6f iters=%d", r, rep.fit, rep.iterations)
        return rep.fit >= fit_threshold

    ranks = list(range(rank_step, max_rank + 1, rank_step))
    if not ranks or ranks[-1] != max_rank:
        ranks.append(max_rank)
    lo, hi = 0, None
    for r in ranks:
        if probe(r):
            hi = r
            break
        lo = r
    if hi is None:
        return RankEstimate(max_rank, sorted(fits.items()), False)
    # invariant: lo fails (or is 0), hi passes
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if probe(mid):
            hi = mid
        else:
            lo = mid
    return RankEstimate(hi, sorted(fits.items()), True)


def write_fit_curve(path, curve: Iterable[tuple[int, float]]) -> None:
    """Write a ``rank,fit`` CSV."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "fit"])
        for r, f in curve:
            w.writerow([int(r), repr(float(f))])
