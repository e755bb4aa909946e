"""Decentralized subspace learning on the Grassmann manifold via gossip."""

from subgossip.manifold import (
    FrechetMean,
    RankDeficient,
    Subspace,
    SubspacesTooFar,
    TangentVector,
    dist_sq,
    exp_map,
    frechet_mean,
    log_map,
    principal_angles,
    project_tangent,
    random_subspace,
    reorthonormalize,
)

__version__ = "0.1.0"

__all__ = [
    "FrechetMean",
    "RankDeficient",
    "Subspace",
    "SubspacesTooFar",
    "TangentVector",
    "dist_sq",
    "exp_map",
    "frechet_mean",
    "log_map",
    "principal_angles",
    "project_tangent",
    "random_subspace",
    "reorthonormalize",
    "__version__",
]
