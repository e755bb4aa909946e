"""Self-contained property checks runnable from the command line.

Each check exercises one contract of the geometry kit, the inner solvers,
or the gossip engine on freshly drawn random instances and reports a
single pass/fail line.  The suite is the quick confidence test for a new
checkout or an unfamiliar platform: it needs no data files and finishes
in a few seconds.
"""

from __future__ import annotations

import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import subspace_angles

from subgossip.data import gen_mc, gen_mtl, partition_columns, partition_tasks
from subgossip.gossip import (
    GossipConfig,
    group_pairs,
    init_agents,
    pair_cost_and_grad,
    parallel_round,
    precondition,
    run,
)
from subgossip.manifold import (
    dist_sq,
    exp_map,
    log_map,
    project_tangent,
    random_subspace,
)
from subgossip.metrics import write_trace


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _random_horizontal(U, rng, length=1.0):
    xi = project_tangent(U, rng.standard_normal(U.basis.shape))
    return project_tangent(U, xi.direction * (length / xi.norm))


def check_exp_log_inverse(rng) -> CheckResult:
    """log_map inverts exp_map for moderate tangents."""
    worst = 0.0
    for _ in range(30):
        U = random_subspace(20, 3, rng)
        xi = _random_horizontal(U, rng, length=0.4)
        V = exp_map(U, xi)
        back = log_map(U, V)
        worst = max(worst, float(np.abs(back.direction - xi.direction).max()))
    return CheckResult(
        "exp-log-inverse", worst <= 1e-8, f"max deviation {worst:.3e}"
    )


def check_distance_identity(rng) -> CheckResult:
    """2 * dist_sq equals the sum of squared principal angles."""
    worst = 0.0
    for _ in range(30):
        U = random_subspace(25, 4, rng)
        V = random_subspace(25, 4, rng)
        theta = subspace_angles(U.basis, V.basis)
        worst = max(
            worst, abs(2.0 * dist_sq(U, V) - float(np.sum(theta**2)))
        )
    return CheckResult(
        "distance-principal-angles", worst <= 1e-8, f"max gap {worst:.3e}"
    )


def check_orthonormality_drift(rng) -> CheckResult:
    """Orthonormality survives a long chain of exponential steps."""
    U = random_subspace(30, 4, rng)
    for _ in range(200):
        U = exp_map(U, _random_horizontal(U, rng, length=0.2))
    resid = float(
        np.linalg.norm(U.basis.T @ U.basis - np.eye(4))
    )
    return CheckResult(
        "orthonormality-drift", resid <= 1e-10, f"residual {resid:.3e}"
    )


def _fd_check(name, point, grad, perturb, rng, tol=1e-4):
    worst = 0.0
    h = 1e-6
    for _ in range(5):
        xi = _random_horizontal(point, rng, length=1.0)
        fd = (perturb(xi, h) - perturb(xi, -h)) / (2.0 * h)
        analytic = float(np.sum(grad.direction * xi.direction))
        scale = max(1.0, abs(fd), abs(analytic))
        worst = max(worst, abs(fd - analytic) / scale)
    return CheckResult(name, worst <= tol, f"max relative error {worst:.3e}")


def check_mc_gradient(rng) -> CheckResult:
    """Completion cost and gradient agree by central finite differences."""
    inst = gen_mc(16, 30, 3, os_ratio=2.5, noise_sd=0.01, rng=rng)
    shard = partition_columns(inst, 1, lam=0.02)[0]
    U = random_subspace(16, 3, rng)
    sol = shard.inner_solve(U)
    grad = project_tangent(U, shard.egrad(U, sol))

    def perturb(xi, h):
        moved = exp_map(U, xi, h)
        return shard.cost(moved, shard.inner_solve(moved))

    return _fd_check("mc-gradient-fd", U, grad, perturb, rng)


def check_mtl_gradient(rng) -> CheckResult:
    """Multitask cost and gradient agree by central finite differences."""
    inst = gen_mtl(T=6, m=14, r=3, d_min=8, d_max=16, noise_sd=0.01, rng=rng)
    group = partition_tasks(inst, 1, lam=0.1)[0]
    U = random_subspace(14, 3, rng)
    sol = group.inner_solve(U)
    grad = project_tangent(U, group.egrad(U, sol))

    def perturb(xi, h):
        moved = exp_map(U, xi, h)
        return group.cost(moved, group.inner_solve(moved))

    return _fd_check("mtl-gradient-fd", U, grad, perturb, rng)


def check_pair_gradient(rng) -> CheckResult:
    """The coupled pair cost matches its two endpoint gradients."""
    inst = gen_mc(14, 24, 2, os_ratio=2.5, noise_sd=0.01, rng=rng)
    shards = partition_columns(inst, 2, lam=0.02)
    cfg = GossipConfig(n_agents=2, rho=2.0, seed=int(rng.integers(2**31)))
    agents = init_agents(cfg, shards, 14, 2)
    rho = 2.0
    pg = pair_cost_and_grad(agents, 1, rho)

    def value(points):
        total = 0.0
        for point, shard in zip(points, shards):
            sol = shard.inner_solve(point)
            total += shard.cost(point, sol)
        return total + rho * dist_sq(points[0], points[1])

    worst = 0.0
    h = 1e-6
    for side, grad in ((0, pg.left), (1, pg.right)):
        base = [a.subspace for a in agents]
        for _ in range(3):
            xi = _random_horizontal(base[side], rng, length=1.0)
            vals = []
            for sign in (1.0, -1.0):
                points = list(base)
                points[side] = exp_map(base[side], xi, sign * h)
                vals.append(value(points))
            fd = (vals[0] - vals[1]) / (2.0 * h)
            analytic = float(np.sum(grad.direction * xi.direction))
            scale = max(1.0, abs(fd), abs(analytic))
            worst = max(worst, abs(fd - analytic) / scale)
    return CheckResult(
        "pair-gradient-fd", worst <= 1e-4, f"max relative error {worst:.3e}"
    )


def check_preconditioner(rng) -> CheckResult:
    """Preconditioning matches the closed forms and the dense inverse."""
    U = random_subspace(12, 3, rng)
    xi = _random_horizontal(U, rng, length=2.0)
    gaps = []
    out = precondition(xi, np.zeros((3, 3)), 4.0)
    gaps.append(float(np.abs(out.direction - xi.direction / 4.0).max()))
    out = precondition(xi, np.eye(3), 1.0)
    gaps.append(float(np.abs(out.direction - xi.direction / 2.0).max()))
    A = rng.standard_normal((5, 3))
    M = A.T @ A
    out = precondition(xi, M, 0.5)
    dense = xi.direction @ np.linalg.inv(M + 0.5 * np.eye(3))
    gaps.append(float(np.abs(out.direction - dense).max()))
    worst = max(gaps)
    return CheckResult(
        "preconditioner-forms", worst <= 1e-10, f"max deviation {worst:.3e}"
    )


def check_parallel_equivalence(rng) -> CheckResult:
    """A parallel round is bit-identical to sequential ascending updates."""
    inst = gen_mc(12, 25, 2, os_ratio=2.5, noise_sd=0.01, rng=rng)
    shards = partition_columns(inst, 5, lam=0.02)
    cfg = GossipConfig(
        n_agents=5, rho=1.0, stepsize_a=0.05, mode="parallel",
        seed=int(rng.integers(2**31)),
    )
    agents = init_agents(cfg, shards, 12, 2)
    mirror = init_agents(cfg, shards, 12, 2)
    rec = parallel_round(agents, 0, cfg, np.random.default_rng(7))
    for i in group_pairs(rec.pair_or_group, 5):
        pg = pair_cost_and_grad(mirror, i, cfg.rho)
        for grad, agent in ((pg.left, mirror[i - 1]), (pg.right, mirror[i])):
            agent.subspace = exp_map(agent.subspace, grad, -rec.gamma)
    identical = all(
        np.array_equal(a.subspace.basis, b.subspace.basis)
        for a, b in zip(agents, mirror)
    )
    return CheckResult(
        "parallel-sequential-identity", identical,
        "states identical" if identical else "states diverged",
    )


def check_trace_determinism(rng) -> CheckResult:
    """Identical config and seed reproduce a byte-identical trace file."""
    inst = gen_mc(12, 25, 2, os_ratio=2.5, noise_sd=0.01,
                  rng=np.random.default_rng(123))
    shards = partition_columns(inst, 3, lam=0.0)
    cfg = GossipConfig(
        n_agents=3, rho=1.0, stepsize_a=0.05, max_slots=40, seed=11
    )
    with tempfile.TemporaryDirectory() as tmp:
        paths = [Path(tmp) / "a.csv", Path(tmp) / "b.csv"]
        blobs = []
        for path in paths:
            result = run(cfg, shards, 12, 2)
            write_trace(path, result.records, cfg.n_agents)
            blobs.append(path.read_bytes())
    identical = blobs[0] == blobs[1]
    return CheckResult(
        "trace-determinism", identical,
        "byte-identical" if identical else "traces differ",
    )


ALL_CHECKS = (
    check_exp_log_inverse,
    check_distance_identity,
    check_orthonormality_drift,
    check_mc_gradient,
    check_mtl_gradient,
    check_pair_gradient,
    check_preconditioner,
    check_parallel_equivalence,
    check_trace_determinism,
)


def run_checks(seed: int = 0, emit=print) -> list[CheckResult]:
    """Run every check, printing one ``PASS``/``FAIL`` line per property."""
    results = []
    for check in ALL_CHECKS:
        rng = np.random.default_rng(np.random.SeedSequence([seed, len(results)]))
        result = check(rng)
        results.append(result)
        status = "PASS" if result.passed else "FAIL"
        detail = f"  ({result.detail})" if result.detail else ""
        emit(f"{status}  {result.name}{detail}")
    failed = sum(1 for r in results if not r.passed)
    emit(
        f"{len(results) - failed}/{len(results)} checks passed"
        if failed == 0
        else f"{failed}/{len(results)} checks FAILED"
    )
    return results
