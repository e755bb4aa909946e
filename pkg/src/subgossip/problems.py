"""Local learning problems defined over a shared low-dimensional subspace.

Two problem families share one interface so the gossip engine can treat them
uniformly: matrix completion on a vertical slice of columns
(:class:`McShard`) and multitask ridge regression with a shared feature
subspace (:class:`TaskGroup`).  Each exposes ``inner_solve`` (the closed-form
coefficients given a basis), ``cost`` and ``egrad`` (the Euclidean gradient
of the cost with respect to the basis, with the coefficients re-solved — by
the envelope argument this is the total derivative).

The local matrix-completion cost for a basis ``U`` and coefficients ``W`` is

    f(U) = 0.5 * ||P_Omega(U W^T) - P_Omega(Y)||_F^2
           + (lam/2) * (||U W^T||_F^2 - ||P_Omega(U W^T)||_F^2),

i.e. half the summed per-column objectives
``||U_Omega_j w - y_j||^2 + lam (w^T G w - ||U_Omega_j w||^2)`` whose unique
minimizer is ``w_j = ((1-lam) U_Omega_j^T U_Omega_j + lam G)^{-1}
U_Omega_j^T y_j`` with ``G = U^T U``.  Keeping the cost as exactly half the
objective the inner solve minimizes makes cost, inner solve and gradient
mutually consistent (finite differences of the re-solved cost match the
gradient), which the regularized variants need.

The multitask cost is, for the same reason,

    f(U) = sum_t [ 0.5 * ||X_t U w_t - y_t||^2 + (lam/2) * ||w_t||^2 ],

with the ridge solution ``w_t = (U^T X_t^T X_t U + lam I)^{-1} U^T X_t^T
y_t``; the ``lam`` term does not depend on ``U``, so the gradient is the
plain residual expression ``sum_t X_t^T (X_t U w_t - y_t) w_t^T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
import scipy.sparse as sp

from subgossip.manifold import Subspace, as_matrix

_FALLBACK_RIDGE = 1e-10


@dataclass(frozen=True)
class InnerSolution:
    """Coefficients of the inner (closed-form) solve at a fixed basis.

    ``coeffs`` has one row per local column (matrix completion) or per task
    (multitask regression); ``metric`` is the Gram matrix ``coeffs^T coeffs``
    used by the gradient preconditioner.
    """

    coeffs: np.ndarray
    metric: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        M = np.asarray(self.metric, dtype=float)
        if c.ndim != 2 or M.shape != (c.shape[1], c.shape[1]):
            raise ValueError("metric must be r x r for (count, r) coeffs")
        if np.abs(M - M.T).max(initial=0.0) > 1e-12:
            raise ValueError("metric must be symmetric")
        for name, a in (("coeffs", c), ("metric", M)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)


def _solution(W: np.ndarray) -> InnerSolution:
    M = W.T @ W
    return InnerSolution(W, (M + M.T) / 2.0)


class LocalTask(Protocol):
    """What the gossip engine needs from an agent's local problem."""

    def inner_solve(self, point) -> InnerSolution: ...

    def cost(self, point, sol: InnerSolution) -> float: ...

    def egrad(self, point, sol: InnerSolution) -> np.ndarray: ...


@dataclass(frozen=True)
class McShard:
    """Observed entries of a vertical slice of a partially known matrix.

    Entries are stored as parallel ``rows``/``cols``/``vals`` arrays sorted
    by (column, row) — the compressed-column layout, with ``indptr`` giving
    the per-column segment boundaries.  ``lam`` is the regularization weight
    of the prediction-energy penalty; with ``lam == 0`` every local column
    must be observed at least once (otherwise its coefficients would be
    arbitrary).

    Parameters
    ----------
    m : int
        Number of rows of the full matrix.
    n_local : int
        Number of columns in this slice.
    rows, cols, vals : array_like
        Observed entries ``(rows[k], cols[k]) -> vals[k]`` with ``cols``
        indexing the local slice.  Any order; duplicates are rejected.
    lam : float
        Regularization weight, ``lam >= 0``.
    """

    m: int
    n_local: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    lam: float = 0.0
    indptr: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.m < 1 or self.n_local < 1:
            raise ValueError("need m >= 1 and n_local >= 1")
        if not self.lam >= 0.0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        rows = np.asarray(self.rows, dtype=np.int64)
        cols = np.asarray(self.cols, dtype=np.int64)
        vals = np.asarray(self.vals, dtype=float)
        if not rows.shape == cols.shape == vals.shape or rows.ndim != 1:
            raise ValueError("rows, cols, vals must be equal-length 1-d arrays")
        if rows.size:
            if rows.min() < 0 or rows.max() >= self.m:
                raise ValueError("row index out of range")
            if cols.min() < 0 or cols.max() >= self.n_local:
                raise ValueError("column index out of range")
        order = np.lexsort((rows, cols))
        rows, cols, vals = rows[order], cols[order], vals[order]
        dup = (np.diff(rows) == 0) & (np.diff(cols) == 0)
        if dup.any():
            k = int(np.flatnonzero(dup)[0])
            raise ValueError(
                f"duplicate entry at (row {rows[k]}, local column {cols[k]})"
            )
        counts = np.bincount(cols, minlength=self.n_local)
        if self.lam == 0.0 and (counts == 0).any():
            j = int(np.flatnonzero(counts == 0)[0])
            raise ValueError(
                f"local column {j} has no observed entries; with lam=0 its "
                "coefficients are undefined"
            )
        indptr = np.concatenate([[0], np.cumsum(counts)])
        for name, a in (("rows", rows), ("cols", cols), ("vals", vals),
                        ("indptr", indptr)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def nnz(self) -> int:
        return self.rows.size

    def sparse(self, data: np.ndarray) -> sp.csc_matrix:
        """An m x n_local CSC matrix with this shard's sparsity and ``data``."""
        return sp.csc_matrix(
            (data, self.rows, self.indptr), shape=(self.m, self.n_local)
        )

    def inner_solve(self, point) -> InnerSolution:
        return mc_inner_solve(point, self)

    def cost(self, point, sol: InnerSolution) -> float:
        return mc_cost(point, self, sol)

    def egrad(self, point, sol: InnerSolution) -> np.ndarray:
        return mc_egrad(point, self, sol)


def _check_mc_sol(B: np.ndarray, shard: McShard, sol: InnerSolution) -> None:
    if sol.coeffs.shape != (shard.n_local, B.shape[1]):
        raise ValueError(
            f"solution shape {sol.coeffs.shape} does not match "
            f"(n_local, r) = ({shard.n_local}, {B.shape[1]})"
        )


def _mc_predictions(B: np.ndarray, shard: McShard, W: np.ndarray) -> np.ndarray:
    return np.einsum("kr,kr->k", B[shard.rows], W[shard.cols])


def mc_inner_solve(U: Subspace | np.ndarray, shard: McShard) -> InnerSolution:
    """Per-column coefficients minimizing the local completion objective.

    Column ``j`` solves ``((1-lam) A_j + lam G) w = U_Omega_j^T y_j`` with
    ``A_j = U_Omega_j^T U_Omega_j`` and ``G = U^T U``.  Columns without
    observations get ``w = 0`` (only legal when ``lam > 0``); singular
    systems at ``lam = 0`` fall back to a tiny deterministic ridge.
    """
    B = as_matrix(U)
    if B.shape[0] != shard.m:
        raise ValueError(f"basis has {B.shape[0]} rows, shard expects {shard.m}")
    r = B.shape[1]
    lam = shard.lam
    G = B.T @ B
    W = np.zeros((shard.n_local, r))
    counts = np.diff(shard.indptr)
    nonempty = np.flatnonzero(counts)
    if nonempty.size == 0:
        return _solution(W)
    starts = shard.indptr[nonempty]
    Br = B[shard.rows]
    A = np.add.reduceat(np.einsum("ki,kj->kij", Br, Br), starts, axis=0)
    b = np.add.reduceat(Br * shard.vals[:, None], starts, axis=0)
    M = (1.0 - lam) * A + lam * G
    if lam == 0.0:
        deficient = counts[nonempty] < r
        if deficient.any():
            scale = 1.0 + np.trace(M[deficient], axis1=1, axis2=2) / r
            M[deficient] += (_FALLBACK_RIDGE * scale)[:, None, None] * np.eye(r)
    try:
        w = np.linalg.solve(M, b[..., None])[..., 0]
    except np.linalg.LinAlgError:
        w = np.empty_like(b)
        for k in range(M.shape[0]):
            try:
                w[k] = np.linalg.solve(M[k], b[k])
            except np.linalg.LinAlgError:
                ridge = _FALLBACK_RIDGE * (1.0 + np.trace(M[k]) / r)
                w[k] = np.linalg.solve(M[k] + ridge * np.eye(r), b[k])
    W[nonempty] = w
    return _solution(W)


def mc_cost(U: Subspace | np.ndarray, shard: McShard, sol: InnerSolution) -> float:
    """Local completion cost at ``U`` with coefficients ``sol``.

    Evaluated from the observed triplets and Gram terms only; the full
    ``m x n_local`` product is never formed.
    """
    B = as_matrix(U)
    _check_mc_sol(B, shard, sol)
    pred = _mc_predictions(B, shard, sol.coeffs)
    fit = 0.5 * float(np.sum((pred - shard.vals) ** 2))
    if shard.lam == 0.0:
        return fit
    G = B.T @ B
    energy = float(np.sum(G * sol.metric)) - float(np.sum(pred**2))
    return fit + 0.5 * shard.lam * energy


def mc_egrad(
    U: Subspace | np.ndarray, shard: McShard, sol: InnerSolution
) -> np.ndarray:
    """Euclidean gradient of :func:`mc_cost` with respect to the basis.

    ``S_resid W + lam (U (W^T W) - S_pred W)`` where ``S_resid`` and
    ``S_pred`` are the sparse residual and prediction matrices on the
    observed support.  With the coefficients re-solved at ``U`` this is the
    total derivative of the re-solved cost (envelope argument).
    """
    B = as_matrix(U)
    _check_mc_sol(B, shard, sol)
    W = sol.coeffs
    pred = _mc_predictions(B, shard, W)
    grad = shard.sparse(pred - shard.vals) @ W
    if shard.lam != 0.0:
        grad = grad + shard.lam * (B @ sol.metric - shard.sparse(pred) @ W)
    return grad


def predict_mc(
    U: Subspace | np.ndarray,
    shard: McShard,
    sol: InnerSolution,
    queries: Sequence[tuple[int, int]] | np.ndarray,
) -> np.ndarray:
    """Model values ``(U W^T)[p, j]`` at (row, local column) query positions."""
    B = as_matrix(U)
    _check_mc_sol(B, shard, sol)
    q = np.asarray(queries, dtype=np.int64)
    if q.size == 0:
        return np.zeros(0)
    if q.ndim != 2 or q.shape[1] != 2:
        raise ValueError("queries must be a sequence of (row, column) pairs")
    p, j = q[:, 0], q[:, 1]
    if p.min() < 0 or p.max() >= shard.m or j.min() < 0 or j.max() >= shard.n_local:
        raise ValueError("query index out of range")
    return np.einsum("kr,kr->k", B[p], sol.coeffs[j])


@dataclass(frozen=True)
class TaskGroup:
    """A set of regression tasks sharing the learned feature subspace.

    Each task is a pair ``(X_t, y_t)`` with ``X_t`` of shape ``(d_t, m)``.
    ``allow_empty`` permits zero-sample tasks, used for held-out evaluation
    containers that must stay index-aligned with a training group.
    """

    tasks: tuple[tuple[np.ndarray, np.ndarray], ...]
    m: int
    lam: float = 0.0
    allow_empty: bool = False

    def __init__(self, tasks, m: int, lam: float = 0.0, allow_empty: bool = False):
        if m < 1:
            raise ValueError("need m >= 1")
        if not lam >= 0.0:
            raise ValueError(f"lam must be >= 0, got {lam}")
        if len(tasks) == 0:
            raise ValueError("need at least one task")
        frozen = []
        for t, (X, y) in enumerate(tasks):
            X = np.asarray(X, dtype=float)
            y = np.asarray(y, dtype=float)
            if X.ndim != 2 or X.shape[1] != m:
                raise ValueError(f"task {t}: X must have shape (d_t, {m})")
            if y.shape != (X.shape[0],):
                raise ValueError(f"task {t}: y length must match rows of X")
            if X.shape[0] == 0 and not allow_empty:
                raise ValueError(f"task {t} has no samples")
            X.setflags(write=False)
            y.setflags(write=False)
            frozen.append((X, y))
        object.__setattr__(self, "tasks", tuple(frozen))
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "allow_empty", allow_empty)

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def n_samples(self) -> int:
        return sum(X.shape[0] for X, _ in self.tasks)

    def inner_solve(self, point) -> InnerSolution:
        return mtl_inner_solve(point, self)

    def cost(self, point, sol: InnerSolution) -> float:
        return mtl_cost(point, self, sol)

    def egrad(self, point, sol: InnerSolution) -> np.ndarray:
        return mtl_egrad(point, self, sol)


def _check_mtl_sol(B: np.ndarray, group: TaskGroup, sol: InnerSolution) -> None:
    if sol.coeffs.shape != (group.n_tasks, B.shape[1]):
        raise ValueError(
            f"solution shape {sol.coeffs.shape} does not match "
            f"(n_tasks, r) = ({group.n_tasks}, {B.shape[1]})"
        )


def mtl_inner_solve(U: Subspace | np.ndarray, group: TaskGroup) -> InnerSolution:
    """Per-task ridge coefficients ``(U^T X_t^T X_t U + lam I)^{-1} U^T X_t^T y_t``.

    Raises ``numpy.linalg.LinAlgError`` for a singular system at ``lam = 0``.
    """
    B = as_matrix(U)
    if B.shape[0] != group.m:
        raise ValueError(f"basis has {B.shape[0]} rows, group expects {group.m}")
    r = B.shape[1]
    W = np.zeros((group.n_tasks, r))
    eye = group.lam * np.eye(r)
    for t, (X, y) in enumerate(group.tasks):
        if X.shape[0] == 0:
            continue
        Bt = X @ B
        W[t] = np.linalg.solve(Bt.T @ Bt + eye, Bt.T @ y)
    return _solution(W)


def mtl_cost(U: Subspace | np.ndarray, group: TaskGroup, sol: InnerSolution) -> float:
    """Summed per-task costs ``0.5 ||X_t U w_t - y_t||^2 + (lam/2) ||w_t||^2``."""
    B = as_matrix(U)
    _check_mtl_sol(B, group, sol)
    total = 0.0
    for t, (X, y) in enumerate(group.tasks):
        w = sol.coeffs[t]
        total += 0.5 * float(np.sum((X @ (B @ w) - y) ** 2))
        total += 0.5 * group.lam * float(w @ w)
    return total


def mtl_egrad(
    U: Subspace | np.ndarray, group: TaskGroup, sol: InnerSolution
) -> np.ndarray:
    """Euclidean gradient ``sum_t X_t^T (X_t U w_t - y_t) w_t^T``."""
    B = as_matrix(U)
    _check_mtl_sol(B, group, sol)
    grad = np.zeros_like(B)
    for t, (X, y) in enumerate(group.tasks):
        w = sol.coeffs[t]
        resid = X @ (B @ w) - y
        grad += np.outer(X.T @ resid, w)
    return grad
