import numpy as np

from subgossip.manifold import Subspace, TangentVector, project_tangent


def random_horizontal(U: Subspace, rng, length: float | None = None) -> TangentVector:
    """Random horizontal tangent at U, optionally rescaled to a given norm."""
    xi = project_tangent(U, rng.standard_normal(U.basis.shape))
    if length is not None:
        if xi.norm == 0.0:
            raise ValueError("degenerate draw")
        xi = TangentVector(xi.direction * (length / xi.norm), U)
    return xi


def orthonormality_residual(B: np.ndarray) -> float:
    return float(np.linalg.norm(B.T @ B - np.eye(B.shape[1])))
