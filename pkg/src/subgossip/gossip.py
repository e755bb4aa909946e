"""Decentralized gossip engine over a chain of agents.

Agents ``1..N`` sit on a chain; neighbors ``(i, i+1)`` form pair ``i``.  The
global objective splits into the single sum over pairs

    g_i = alpha_i f_i(U_i) + alpha_{i+1} f_{i+1}(U_{i+1})
          + 0.5 * rho * ||Log_{U_i}(U_{i+1})||_F^2,

with ``alpha_i = 1`` for the chain endpoints and ``0.5`` inside (interior
agents appear in two pairs).  The consensus energy is defined so that its
Riemannian gradient on each side is exactly ``-rho * Log`` toward the
neighbor, making the pair cost and the emitted tangents finite-difference
consistent.

One stochastic *slot* samples a pair uniformly and moves both of its agents
along the negative pair gradient with stepsize ``gamma_k = a / (1 + b k)``.
The parallel variant samples the odd or the even half of the pairs (a
red-black split of the chain) each round; pairs within a group touch
disjoint agents, so applying them is order-independent.  The Euclidean
baseline runs the same sampling with unconstrained matrices, flat consensus
``rho * (U_i - U_j)`` and no retraction.

Randomness discipline: the master seed spawns one stream for the initial
subspaces and one for pair/group selection, and each slot draws its
selection before touching any state — so runs that differ only in geometry
or preconditioning see identical sampling sequences.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

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
    project_tangent,
    random_subspace,
    reorthonormalize,
)
from subgossip.problems import LocalTask

MODES = ("stochastic", "parallel")
GEOMETRIES = ("grassmann", "euclidean")


class GossipAbort(RuntimeError):
    """A slot could not be completed; the run stops with state intact."""


@dataclass
class AgentState:
    """One agent: chain position, current point, local problem, bookkeeping.

    ``subspace`` holds a :class:`Subspace` in Grassmann mode and a plain
    unconstrained ``m x r`` array in Euclidean mode.
    """

    id: int
    subspace: Subspace | np.ndarray
    task: LocalTask
    update_count: int = 0


@dataclass(frozen=True)
class GossipConfig:
    n_agents: int
    rho: float
    stepsize_a: float = 0.1
    stepsize_b: float = 0.01
    max_slots: int = 0
    mode: str = "stochastic"
    geometry: str = "grassmann"
    precon: bool = False
    seed: int = 0
    reorth_every: int = 100
    cost_cadence: int = 10

    def __post_init__(self):
        if self.n_agents < 2:
            raise ValueError("need at least 2 agents")
        if self.rho < 0:
            raise ValueError("rho must be >= 0")
        if self.stepsize_a <= 0 or self.stepsize_b <= 0:
            raise ValueError("stepsize constants must be positive")
        if self.max_slots < 0:
            raise ValueError("max_slots must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.geometry not in GEOMETRIES:
            raise ValueError(f"geometry must be one of {GEOMETRIES}")
        if self.mode == "parallel" and self.n_agents < 3:
            raise ValueError("parallel mode needs at least 3 agents")
        if self.mode == "parallel" and self.geometry == "euclidean":
            raise ValueError("parallel mode is defined for grassmann geometry")
        if self.reorth_every < 1 or self.cost_cadence < 1:
            raise ValueError("reorth_every and cost_cadence must be >= 1")


@dataclass(frozen=True)
class PairGradient:
    """Gradients of one pair cost at both endpoints, plus the cost value."""

    left: TangentVector
    right: TangentVector
    g_value: float
    left_metric: np.ndarray = field(repr=False, default=None)
    right_metric: np.ndarray = field(repr=False, default=None)


@dataclass(frozen=True)
class TraceRecord:
    """State of the run after one slot (or one parallel round)."""

    slot: int
    gamma: float
    mode: str
    pair_or_group: str
    g_value: float
    consensus: tuple[float, ...]
    costs: tuple[float, ...] | None = None


def alpha(i: int, N: int) -> float:
    """Weight of agent ``i`` in the single-sum pair costs: endpoints 1, else 0.5."""
    if not 1 <= i <= N:
        raise ValueError(f"agent index {i} outside 1..{N}")
    return 1.0 if i in (1, N) else 0.5


def stepsize(k: int, a: float, b: float) -> float:
    """Diminishing schedule ``a / (1 + b k)`` (divergent sum, convergent squares)."""
    return a / (1.0 + b * k)


def pair_cost_and_grad(
    agents: list[AgentState], i: int, rho: float
) -> PairGradient:
    """Cost and both endpoint gradients of pair ``i`` (1-based, ``i <= N-1``).

    The left tangent is ``alpha_i rgrad f_i - rho Log_{U_i}(U_{i+1})`` and
    symmetrically for the right.  With ``rho = 0`` the logs are skipped
    entirely, so decoupled runs never hit the cut locus.

    Raises :class:`subgossip.manifold.SubspacesTooFar` when a needed
    logarithm is undefined.
    """
    N = len(agents)
    if not 1 <= i <= N - 1:
        raise ValueError(f"pair index {i} outside 1..{N - 1}")
    left_agent, right_agent = agents[i - 1], agents[i]
    a_l, a_r = alpha(left_agent.id, N), alpha(right_agent.id, N)
    U, V = left_agent.subspace, right_agent.subspace

    sol_l = left_agent.task.inner_solve(U)
    sol_r = right_agent.task.inner_solve(V)
    f_l = left_agent.task.cost(U, sol_l)
    f_r = right_agent.task.cost(V, sol_r)
    g_l = project_tangent(U, a_l * left_agent.task.egrad(U, sol_l))
    g_r = project_tangent(V, a_r * right_agent.task.egrad(V, sol_r))

    g_value = a_l * f_l + a_r * f_r
    if rho != 0.0:
        log_lr = log_map(U, V)
        log_rl = log_map(V, U)
        g_value += 0.5 * rho * log_lr.norm**2
        g_l = project_tangent(U, g_l.direction - rho * log_lr.direction)
        g_r = project_tangent(V, g_r.direction - rho * log_rl.direction)
    return PairGradient(g_l, g_r, float(g_value), sol_l.metric, sol_r.metric)


def precondition(
    grad: TangentVector, metric: np.ndarray, rho: float
) -> TangentVector:
    """Right-multiply a gradient by ``(metric + rho I)^{-1}``.

    ``metric`` is the solution Gram matrix (coefficients' ``W^T W``); adding
    ``rho I`` makes the system positive definite, and large ``rho`` turns
    the preconditioned consensus pull back into a plain ``-Log`` step.
    Right-multiplication by an ``r x r`` matrix preserves horizontality.
    """
    M = np.asarray(metric, dtype=float)
    r = M.shape[0]
    if M.shape != (r, r) or np.abs(M - M.T).max(initial=0.0) > 1e-10:
        raise ValueError("metric must be a symmetric r x r matrix")
    eigs = np.linalg.eigvalsh(M)
    if eigs[0] < -1e-10 * max(1.0, eigs[-1]):
        raise ValueError(
            f"metric must be positive semidefinite (min eigenvalue {eigs[0]:.3e})"
        )
    system = M + rho * np.eye(r)
    try:
        factor = cho_factor(system, lower=True)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"metric + rho*I is not positive definite: {exc}")
    direction = cho_solve(factor, grad.direction.T).T
    return TangentVector(direction, grad.anchor)


def _grassmann_pair_update(
    agents: list[AgentState], i: int, gamma: float, config: GossipConfig
) -> PairGradient:
    pg = pair_cost_and_grad(agents, i, config.rho)
    steps = (pg.left, pg.left_metric, agents[i - 1]), (
        pg.right,
        pg.right_metric,
        agents[i],
    )
    for grad, metric, agent in steps:
        if config.precon:
            grad = precondition(grad, metric, config.rho)
        agent.subspace = exp_map(agent.subspace, grad, scale=-gamma)
        agent.update_count += 1
        if agent.update_count % config.reorth_every == 0:
            agent.subspace = reorthonormalize(agent.subspace)
    return pg


def _consensus_distances(agents: list[AgentState]) -> tuple[float, ...]:
    """d_i between adjacent agents; +inf where the distance is undefined."""
    out = []
    for left, right in zip(agents, agents[1:]):
        try:
            U = _as_subspace(left.subspace)
            V = _as_subspace(right.subspace)
            out.append(dist_sq(U, V))
        except (SubspacesTooFar, RankDeficient):
            out.append(math.inf)
    return tuple(out)


def _as_subspace(point: Subspace | np.ndarray) -> Subspace:
    if isinstance(point, Subspace):
        return point
    return reorthonormalize(point)


def _local_costs(agents: list[AgentState]) -> tuple[float, ...]:
    out = []
    for agent in agents:
        sol = agent.task.inner_solve(agent.subspace)
        out.append(float(agent.task.cost(agent.subspace, sol)))
    return tuple(out)


def _record(
    agents: list[AgentState],
    slot: int,
    gamma: float,
    mode: str,
    label: str,
    g_value: float,
    config: GossipConfig,
) -> TraceRecord:
    costs = _local_costs(agents) if slot % config.cost_cadence == 0 else None
    return TraceRecord(
        slot, gamma, mode, label, g_value, _consensus_distances(agents), costs
    )


def stochastic_slot(
    agents: list[AgentState], k: int, config: GossipConfig, rng
) -> TraceRecord:
    """One slot: sample a pair uniformly, update both of its agents.

    A cut-locus failure is retried once with a fresh pair draw; a second
    consecutive failure raises :class:`GossipAbort` with the state intact.
    """
    gamma = stepsize(k, config.stepsize_a, config.stepsize_b)
    N = len(agents)
    i = int(rng.integers(1, N))
    try:
        pg = _grassmann_pair_update(agents, i, gamma, config)
    except SubspacesTooFar:
        i = int(rng.integers(1, N))
        try:
            pg = _grassmann_pair_update(agents, i, gamma, config)
        except SubspacesTooFar as exc:
            raise GossipAbort(
                f"slot {k}: two consecutive cut-locus failures (last pair {i}): {exc}"
            ) from exc
    return _record(agents, k, gamma, "stochastic", str(i), pg.g_value, config)


def group_pairs(label: str, N: int) -> list[int]:
    """Pair indices of the red-black groups: odd = 1,3,..., even = 2,4,..."""
    start = 1 if label == "odd" else 2
    return list(range(start, N))[::2]


def parallel_round(
    agents: list[AgentState], k: int, config: GossipConfig, rng
) -> TraceRecord:
    """One round: flip a coin for the odd or even pair group, update it all.

    Gradients for the whole group are computed from the pre-round state and
    then applied in ascending pair order; the group's pairs touch disjoint
    agents, so this is bit-identical to sequential slot-style application.
    """
    gamma = stepsize(k, config.stepsize_a, config.stepsize_b)
    N = len(agents)
    label = "odd" if rng.random() < 0.5 else "even"
    try:
        g_total = _apply_group(agents, label, gamma, config)
    except SubspacesTooFar:
        label = "odd" if rng.random() < 0.5 else "even"
        try:
            g_total = _apply_group(agents, label, gamma, config)
        except SubspacesTooFar as exc:
            raise GossipAbort(
                f"round {k}: two consecutive cut-locus failures "
                f"(last group {label}): {exc}"
            ) from exc
    return _record(agents, k, gamma, "parallel", label, g_total, config)


def _apply_group(
    agents: list[AgentState], label: str, gamma: float, config: GossipConfig
) -> float:
    pairs = group_pairs(label, len(agents))
    grads = [pair_cost_and_grad(agents, i, config.rho) for i in pairs]
    total = 0.0
    for i, pg in zip(pairs, grads):
        for grad, metric, agent in (
            (pg.left, pg.left_metric, agents[i - 1]),
            (pg.right, pg.right_metric, agents[i]),
        ):
            if config.precon:
                grad = precondition(grad, metric, config.rho)
            agent.subspace = exp_map(agent.subspace, grad, scale=-gamma)
            agent.update_count += 1
            if agent.update_count % config.reorth_every == 0:
                agent.subspace = reorthonormalize(agent.subspace)
        total += pg.g_value
    return total


def _check_full_rank(agent: AgentState, k: int) -> None:
    B = agent.subspace
    s = np.linalg.svd(B, compute_uv=False)
    if s[-1] < 1e-10 * max(s[0], 1.0):
        raise GossipAbort(
            f"slot {k}: agent {agent.id} iterate is numerically rank-deficient "
            f"(smallest singular value {s[-1]:.3e})"
        )


def euclidean_slot(
    agents: list[AgentState], k: int, config: GossipConfig, rng
) -> TraceRecord:
    """Flat-space baseline slot: same sampling, no manifold machinery.

    Both selected agents take ``U <- U - gamma (alpha grad f + rho (U - V))``
    on raw matrices.  Consensus distances in the trace are computed between
    the column spans of the iterates (orthonormalized copies).
    """
    gamma = stepsize(k, config.stepsize_a, config.stepsize_b)
    N = len(agents)
    i = int(rng.integers(1, N))
    left_agent, right_agent = agents[i - 1], agents[i]
    _check_full_rank(left_agent, k)
    _check_full_rank(right_agent, k)
    U, V = left_agent.subspace, right_agent.subspace
    a_l, a_r = alpha(left_agent.id, N), alpha(right_agent.id, N)

    sol_l = left_agent.task.inner_solve(U)
    sol_r = right_agent.task.inner_solve(V)
    f_l = left_agent.task.cost(U, sol_l)
    f_r = right_agent.task.cost(V, sol_r)
    diff = U - V
    g_value = a_l * f_l + a_r * f_r + 0.5 * config.rho * float(np.sum(diff**2))

    step_l = a_l * left_agent.task.egrad(U, sol_l) + config.rho * diff
    step_r = a_r * right_agent.task.egrad(V, sol_r) - config.rho * diff
    if config.precon:
        rbig = U.shape[1]
        for agent, step, metric in (
            (left_agent, step_l, sol_l.metric),
            (right_agent, step_r, sol_r.metric),
        ):
            system = metric + config.rho * np.eye(rbig)
            step = np.linalg.solve(system, step.T).T
            agent.subspace = agent.subspace - gamma * step
            agent.update_count += 1
    else:
        left_agent.subspace = U - gamma * step_l
        right_agent.subspace = V - gamma * step_r
        left_agent.update_count += 1
        right_agent.update_count += 1
    return _record(agents, k, gamma, "stochastic", str(i), g_value, config)


@dataclass
class RunResult:
    agents: list[AgentState]
    records: list[TraceRecord]
    frechet: FrechetMean | None
    slots: int
    seconds: float

    @property
    def subspaces(self) -> list[Subspace]:
        return [_as_subspace(a.subspace) for a in self.agents]


def init_agents(
    config: GossipConfig, tasks: list[LocalTask], m: int, rank: int
) -> list[AgentState]:
    """Independent random starting subspaces, one agent per task.

    The initialization stream is the first child of the master seed, so it
    is shared verbatim between geometry/preconditioning variants.
    """
    if len(tasks) != config.n_agents:
        raise ValueError(
            f"{config.n_agents} agents configured but {len(tasks)} tasks given"
        )
    init_ss, _ = np.random.SeedSequence(config.seed).spawn(2)
    rng = np.random.default_rng(init_ss)
    agents = []
    for idx, task in enumerate(tasks, start=1):
        point = random_subspace(m, rank, rng)
        if config.geometry == "euclidean":
            point = point.basis.copy()
        agents.append(AgentState(id=idx, subspace=point, task=task))
    return agents


def run(
    config: GossipConfig,
    tasks: list[LocalTask],
    m: int,
    rank: int,
    trace_sink=None,
) -> RunResult:
    """Run the configured engine for ``max_slots`` slots (or rounds).

    Returns the final agents, all trace records, and the Fréchet mean of
    the agents' subspaces (``None`` if the mean iteration failed).  With
    ``max_slots = 0`` the freshly initialized agents are returned unchanged.
    ``trace_sink``, if given, is called with each :class:`TraceRecord` as it
    is produced.
    """
    agents = init_agents(config, tasks, m, rank)
    _, select_ss = np.random.SeedSequence(config.seed).spawn(2)
    rng = np.random.default_rng(select_ss)
    if config.geometry == "euclidean":
        slot_fn = euclidean_slot
    elif config.mode == "parallel":
        slot_fn = parallel_round
    else:
        slot_fn = stochastic_slot
    records: list[TraceRecord] = []
    start = time.perf_counter()
    for k in range(config.max_slots):
        rec = slot_fn(agents, k, config, rng)
        records.append(rec)
        if trace_sink is not None:
            trace_sink(rec)
    seconds = time.perf_counter() - start
    try:
        mean = frechet_mean([_as_subspace(a.subspace) for a in agents])
    except (SubspacesTooFar, RankDeficient):
        mean = None
    return RunResult(agents, records, mean, len(records), seconds)
