"""Grassmann manifold primitives.

A point on Gr(r, m) is the span of an orthonormal ``m x r`` matrix; all
operations below work on such representatives.  Tangent vectors are kept in
the horizontal space ``{Z : U^T Z = 0}`` of the representative.

The squared distance convention used throughout the package is

    dist_sq(U, V) = 0.5 * ||log_map(U, V)||_F^2,

which equals half the sum of squared principal angles between the spans.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.linalg import norm
from scipy.linalg import qr, svd

ORTHO_TOL = 1e-10
HORIZ_TOL = 1e-10
_LOG_SINGULAR_TOL = 1e-12
_EXP_REORTH_TOL = 1e-12


class SubspacesTooFar(RuntimeError):
    """Raised when ``log_map(U, V)`` is undefined because ``U^T V`` is
    numerically singular (the spans contain orthogonal directions)."""


class RankDeficient(ValueError):
    """Raised when a matrix that should have full column rank does not."""


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Subspace:
    """An orthonormal representative of a point on Gr(r, m).

    Parameters
    ----------
    basis : ndarray, shape (m, r)
        Matrix with orthonormal columns, ``1 <= r < m``.  Validated on
        construction (``||U^T U - I||_F <= 1e-10``) and stored read-only.
    """

    basis: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.basis, dtype=float)
        if b.ndim != 2:
            raise ValueError(f"basis must be 2-d, got shape {b.shape}")
        m, r = b.shape
        if not 1 <= r < m:
            raise ValueError(f"need 1 <= r < m, got (m, r) = ({m}, {r})")
        residual = norm(b.T @ b - np.eye(r))
        if residual > ORTHO_TOL:
            raise ValueError(
                f"basis is not orthonormal: ||U^T U - I||_F = {residual:.3e}"
            )
        object.__setattr__(self, "basis", _readonly(b))

    @property
    def m(self) -> int:
        return self.basis.shape[0]

    @property
    def r(self) -> int:
        return self.basis.shape[1]


@dataclass(frozen=True)
class TangentVector:
    """A horizontal tangent vector at ``anchor``.

    Horizontality ``||anchor^T direction||_F <= 1e-10 (1 + ||direction||_F)``
    is validated on construction; use :func:`project_tangent` to
    horizontalize an arbitrary ambient matrix first.
    """

    direction: np.ndarray
    anchor: Subspace = field(repr=False)

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        if d.shape != self.anchor.basis.shape:
            raise ValueError(
                f"direction shape {d.shape} does not match anchor "
                f"shape {self.anchor.basis.shape}"
            )
        residual = norm(self.anchor.basis.T @ d)
        if residual > HORIZ_TOL * (1.0 + float(norm(d))):
            raise ValueError(
                f"direction is not horizontal: ||U^T xi||_F = {residual:.3e}"
            )
        object.__setattr__(self, "direction", _readonly(d))

    @property
    def norm(self) -> float:
        return float(norm(self.direction))


def _same_anchor(U: Subspace, xi: TangentVector) -> None:
    if xi.anchor is not U and not np.array_equal(xi.anchor.basis, U.basis):
        raise ValueError("tangent vector is anchored at a different subspace")


def _check_compatible(U: Subspace, V: Subspace) -> None:
    if U.basis.shape != V.basis.shape:
        raise ValueError(
            f"incompatible shapes {U.basis.shape} and {V.basis.shape}"
        )


def project_tangent(U: Subspace, Z: np.ndarray) -> TangentVector:
    """Project an ambient ``m x r`` matrix onto the horizontal space at ``U``.

    Computes ``Z - U (U^T Z)``.  This is also the conversion from a Euclidean
    gradient to the Riemannian gradient, see :func:`egrad_to_rgrad`.
    """
    Z = np.asarray(Z, dtype=float)
    if Z.shape != U.basis.shape:
        raise ValueError(f"expected shape {U.basis.shape}, got {Z.shape}")
    return TangentVector(Z - U.basis @ (U.basis.T @ Z), U)


def egrad_to_rgrad(U: Subspace, egrad: np.ndarray) -> TangentVector:
    """Riemannian gradient at ``U`` from the Euclidean gradient (projection)."""
    return project_tangent(U, egrad)


def exp_map(U: Subspace, xi: TangentVector, scale: float = 1.0) -> Subspace:
    """Exponential map: follow the geodesic from ``U`` along ``scale * xi``.

    With the thin SVD ``scale * xi = W diag(s) V^T`` the geodesic endpoint is

        U V cos(diag(s)) V^T + W sin(diag(s)) V^T.

    The result is re-orthonormalized only if its orthonormality residual
    exceeds ``1e-12``, so exact-arithmetic identities (``scale = 0`` returns
    the representative ``U`` itself) survive.

    Parameters
    ----------
    U : Subspace
        Starting point; must be the anchor of ``xi``.
    xi : TangentVector
        Direction (horizontal at ``U``).
    scale : float
        Step length multiplier applied to ``xi``.
    """
    _same_anchor(U, xi)
    if scale == 0.0 or not xi.direction.any():
        return U
    W, s, Vt = svd(scale * xi.direction, full_matrices=False)
    cos_part = (U.basis @ Vt.T) * np.cos(s)
    sin_part = W * np.sin(s)
    new_basis = (cos_part + sin_part) @ Vt
    residual = norm(new_basis.T @ new_basis - np.eye(U.r))
    if residual > _EXP_REORTH_TOL:
        return reorthonormalize(new_basis)
    return Subspace(new_basis)


def log_map(U: Subspace, V: Subspace) -> TangentVector:
    """Inverse of the exponential map: the tangent at ``U`` pointing to ``V``.

    Computes the thin SVD ``P diag(s) Q^T`` of ``(V - U (U^T V)) (U^T V)^{-1}``
    and returns ``P arctan(diag(s)) Q^T``.

    Raises
    ------
    SubspacesTooFar
        If the smallest singular value of ``U^T V`` is below ``1e-12`` (some
        principal angle is numerically ``pi/2``; the spans are too far apart
        for the logarithm to be defined).
    """
    _check_compatible(U, V)
    M = U.basis.T @ V.basis
    smallest = svd(M, compute_uv=False)[-1]
    if smallest < _LOG_SINGULAR_TOL:
        raise SubspacesTooFar(
            f"U^T V has smallest singular value {smallest:.3e}; "
            "the logarithm is undefined"
        )
    A = V.basis - U.basis @ M
    X = np.linalg.solve(M.T, A.T).T
    P, s, Qt = svd(X, full_matrices=False)
    direction = (P * np.arctan(s)) @ Qt
    # Horizontal up to rounding by construction; clean up before validating.
    direction -= U.basis @ (U.basis.T @ direction)
    return TangentVector(direction, U)


def dist_sq(U: Subspace, V: Subspace) -> float:
    """Squared subspace distance ``0.5 * ||log_map(U, V)||_F^2``.

    Equals ``0.5 * sum(theta_i^2)`` over the principal angles ``theta_i``.
    Propagates :class:`SubspacesTooFar` from :func:`log_map`.
    """
    return 0.5 * log_map(U, V).norm ** 2


def principal_angles(U: Subspace, V: Subspace) -> np.ndarray:
    """Principal angles between the spans, ascending, in ``[0, pi/2]``.

    Computed as ``arccos`` of the singular values of ``U^T V`` clamped to
    ``[0, 1]``.  Well defined for every pair (unlike :func:`log_map`).
    """
    _check_compatible(U, V)
    cosines = svd(U.basis.T @ V.basis, compute_uv=False)
    return np.arccos(np.clip(cosines, 0.0, 1.0))


def random_subspace(m: int, r: int, rng: np.random.Generator) -> Subspace:
    """Draw a subspace from the rotation-invariant distribution on Gr(r, m).

    QR factorization of an ``m x r`` standard Gaussian matrix, with column
    signs fixed so the factorization (and hence the draw) is unique.
    """
    G = rng.standard_normal((m, r))
    return reorthonormalize(G)


def reorthonormalize(basis: np.ndarray | Subspace) -> Subspace:
    """Return a Subspace spanning the columns of ``basis`` via thin QR.

    Signs are fixed so the diagonal of R is nonnegative, making the result a
    deterministic function of the input.

    Raises
    ------
    RankDeficient
        If ``basis`` does not have full column rank (a diagonal entry of R
        vanishes relative to the largest one).
    """
    B = basis.basis if isinstance(basis, Subspace) else np.asarray(basis, float)
    Q, R = qr(B, mode="economic")
    diag = np.diagonal(R)
    scale = np.abs(diag).max(initial=0.0)
    if scale == 0.0 or np.abs(diag).min() < 1e-13 * scale:
        raise RankDeficient("matrix does not have full column rank")
    signs = np.sign(diag)
    return Subspace(Q * signs)


@dataclass(frozen=True)
class FrechetMean:
    """Result of :func:`frechet_mean`: the mean point plus convergence info."""

    subspace: Subspace
    converged: bool
    iterations: int
    grad_norm: float


def frechet_mean(
    subspaces: list[Subspace], tol: float = 1e-8, max_iter: int = 100
) -> FrechetMean:
    """Karcher/Fréchet mean of a list of subspaces by fixed-point iteration.

    Starting from the first element, repeatedly averages the logarithms of
    all points at the current estimate and moves along the exponential map,
    until the mean-log norm drops below ``tol``.

    Propagates :class:`SubspacesTooFar` if some point leaves the injectivity
    domain of the current estimate.
    """
    if not subspaces:
        raise ValueError("need at least one subspace")
    mean = subspaces[0]
    grad_norm = np.inf
    for it in range(max_iter):
        avg = np.zeros_like(mean.basis)
        for S in subspaces:
            avg += log_map(mean, S).direction
        avg /= len(subspaces)
        grad_norm = float(norm(avg))
        if grad_norm <= tol:
            return FrechetMean(mean, True, it, grad_norm)
        mean = exp_map(mean, TangentVector(avg, mean))
    return FrechetMean(mean, False, max_iter, grad_norm)


def as_matrix(point: Subspace | np.ndarray) -> np.ndarray:
    """Basis matrix of a Subspace, or the array itself (Euclidean mode)."""
    return point.basis if isinstance(point, Subspace) else np.asarray(point, float)
