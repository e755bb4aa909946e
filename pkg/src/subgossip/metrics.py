"""Evaluation metrics and run-artifact readers/writers.

Prediction quality is reported as MSE/RMSE on explicit entry lists for
completion problems and as NMSE (per-task MSE over label variance, averaged
across tasks) for multitask problems.  Subspace recovery is the principal-
angle error ``sqrt(sum theta_i^2)`` and agreement along the chain is the
vector of adjacent squared subspace distances.

The trace CSV and summary JSON formats produced here are the package's
on-disk contract: floats are written with ``repr`` (shortest round-trip
form), undefined distances appear as the parseable sentinel ``inf``, and
the summary carries an explicit ``schema_version``.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from subgossip.gossip import AgentState, TraceRecord
from subgossip.manifold import (
    RankDeficient,
    Subspace,
    SubspacesTooFar,
    dist_sq,
    principal_angles,
    reorthonormalize,
)
from subgossip.problems import InnerSolution, McShard, TaskGroup, predict_mc

SCHEMA_VERSION = 1


def _as_triplet_arrays(entries) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (
        np.asarray(entries.rows, dtype=np.int64),
        np.asarray(entries.cols, dtype=np.int64),
        np.asarray(entries.vals, dtype=float),
    )


def mse_mc(U, shard: McShard, sol: InnerSolution, entries) -> float:
    """Mean squared residual of the factored model over the given entries.

    ``entries`` is any object with ``rows``/``cols``/``vals`` arrays (local
    column indices).  Raises ``ValueError`` for an empty entry list or
    out-of-bounds indices.
    """
    rows, cols, vals = _as_triplet_arrays(entries)
    if rows.size == 0:
        raise ValueError("cannot compute MSE over an empty entry list")
    pred = predict_mc(U, shard, sol, np.column_stack([rows, cols]))
    return float(np.mean((pred - vals) ** 2))


def rmse_mc(U, shard: McShard, sol: InnerSolution, entries) -> float:
    """Root of :func:`mse_mc` over the same entries."""
    return math.sqrt(mse_mc(U, shard, sol, entries))


def relative_rmse_mc(U, shard: McShard, sol: InnerSolution, entries) -> float:
    """RMSE normalized by the root mean square of the reference values."""
    rows, cols, vals = _as_triplet_arrays(entries)
    scale = float(np.sqrt(np.mean(vals**2))) if vals.size else 0.0
    if scale == 0.0:
        raise ValueError("reference entries have zero root mean square")
    return rmse_mc(U, shard, sol, entries) / scale


@dataclass(frozen=True)
class NmseReport:
    """Per-task normalized MSEs with the exclusion bookkeeping.

    ``per_task`` is aligned with the group's tasks and holds ``nan`` at
    excluded positions (empty tasks or zero label variance); ``excluded``
    lists those task indices; ``value`` averages the rest.
    """

    value: float
    per_task: tuple[float, ...]
    excluded: tuple[int, ...]


def nmse_report(U, group: TaskGroup, sol: InnerSolution) -> NmseReport:
    """NMSE of each task in ``group`` using the coefficients in ``sol``.

    Task ``t`` scores ``mean((X_t U w_t - y_t)^2) / var(y_t)`` with the
    population variance (divide by the sample count).  Tasks with no
    samples or zero label variance are excluded from the average and
    reported with a warning.  ``sol`` may come from a different (aligned)
    group, e.g. coefficients fit on training samples evaluated here on
    held-out samples.
    """
    from subgossip.problems import as_matrix  # local to avoid re-export

    B = as_matrix(U)
    if sol.coeffs.shape[0] != group.n_tasks:
        raise ValueError(
            f"solution has {sol.coeffs.shape[0]} coefficient rows for "
            f"{group.n_tasks} tasks"
        )
    per_task, excluded = [], []
    for t, (X, y) in enumerate(group.tasks):
        var = float(np.var(y)) if y.size else 0.0
        if var <= 0.0:
            per_task.append(math.nan)
            excluded.append(t)
            continue
        resid = X @ (B @ sol.coeffs[t]) - y
        per_task.append(float(np.mean(resid**2)) / var)
    if excluded:
        warnings.warn(
            f"{len(excluded)} of {group.n_tasks} tasks excluded from NMSE "
            f"(empty or zero label variance): {excluded}",
            stacklevel=2,
        )
    kept = [v for v in per_task if not math.isnan(v)]
    if not kept:
        raise ValueError("no task has positive label variance")
    return NmseReport(
        float(np.mean(kept)), tuple(per_task), tuple(excluded)
    )


def nmse(U, group: TaskGroup, sol: InnerSolution) -> float:
    """Mean per-task NMSE; see :func:`nmse_report` for the details."""
    return nmse_report(U, group, sol).value


def _span(point) -> Subspace:
    if isinstance(point, Subspace):
        return point
    return reorthonormalize(np.asarray(point, dtype=float))


def subspace_error(U, U_star) -> float:
    """Principal-angle error ``sqrt(sum theta_i^2)`` between two spans.

    Accepts :class:`Subspace` instances or plain full-rank matrices (only
    their column spans matter).  Zero exactly when the spans coincide.
    """
    theta = principal_angles(_span(U), _span(U_star))
    return float(np.sqrt(np.sum(theta**2)))


def consensus_profile(agents) -> np.ndarray:
    """Adjacent squared subspace distances ``d_i`` along the chain.

    ``agents`` may be :class:`~subgossip.gossip.AgentState` objects,
    subspaces, or raw basis matrices.  Propagates
    :class:`~subgossip.manifold.SubspacesTooFar` when a pair has no
    defined distance (trace writers record such entries as ``inf``).
    """
    points = [
        _span(a.subspace if isinstance(a, AgentState) else a) for a in agents
    ]
    if len(points) < 2:
        raise ValueError("need at least two agents")
    return np.array(
        [dist_sq(a, b) for a, b in zip(points, points[1:])], dtype=float
    )


# ---------------------------------------------------------------------------
# Run summaries


@dataclass(frozen=True)
class RunSummary:
    """Final metrics of one run, the payload of ``summary.json``.

    ``agents`` holds one metric dict per agent (keys depend on the problem
    type, e.g. ``train_mse``/``test_rmse`` or ``test_nmse``); ``frechet``
    holds the mean-subspace metrics.  Agent and mean metrics must be
    finite; consensus entries may be ``inf`` (undefined distances).
    """

    agents: tuple[dict, ...]
    consensus: tuple[float, ...]
    frechet: dict
    slots: int
    wall_clock: dict
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for scope in (*self.agents, self.frechet):
            for key, value in scope.items():
                if isinstance(value, float) and not math.isfinite(value):
                    raise ValueError(f"metric {key!r} is not finite: {value}")


def _evaluate_at(point, shard, test):
    sol = shard.inner_solve(point)
    out = {"train_mse": mse_mc(point, shard, sol, shard)}
    if test is not None and len(test):
        out["test_mse"] = mse_mc(point, shard, sol, test)
        out["test_rmse"] = math.sqrt(out["test_mse"])
        out["test_rel_rmse"] = relative_rmse_mc(point, shard, sol, test)
    return sol, out


def mc_run_summary(
    result, shards, test_entries=None, config=None, wall_clock=None
) -> RunSummary:
    """Evaluate a finished completion run: per-agent and mean-subspace metrics.

    ``test_entries`` aligns with the agents (``None`` or empty lists skip
    test metrics).  The Fréchet-mean metrics re-solve every shard's inner
    problem at the mean subspace and pool the squared test residuals.
    """
    tests = test_entries or [None] * len(shards)
    agents = []
    for agent, shard, test in zip(result.agents, shards, tests):
        _, metrics = _evaluate_at(agent.subspace, shard, test)
        agents.append(metrics)
    frechet: dict = {}
    if result.frechet is not None:
        mean = result.frechet.subspace
        frechet["converged"] = bool(result.frechet.converged)
        sq_sum, count, train = 0.0, 0, []
        for shard, test in zip(shards, tests):
            sol, metrics = _evaluate_at(mean, shard, test)
            train.append(metrics["train_mse"])
            if test is not None and len(test):
                sq_sum += metrics["test_mse"] * len(test)
                count += len(test)
        frechet["train_mse"] = float(np.mean(train))
        if count:
            frechet["test_rmse"] = math.sqrt(sq_sum / count)
    consensus = tuple(
        float(d) for d in _trace_consensus(result)
    )
    return RunSummary(
        tuple(agents), consensus, frechet, result.slots,
        dict(wall_clock or {}), dict(config or {}),
    )


def mtl_run_summary(
    result, groups, test_groups=None, u_star=None, config=None,
    wall_clock=None,
) -> RunSummary:
    """Evaluate a finished multitask run.

    Coefficients are fit on each agent's training group and scored on the
    aligned test group (when given).  ``u_star`` adds the principal-angle
    error of every agent and of the mean subspace.
    """
    tests = test_groups or [None] * len(groups)
    agents = []
    for agent, group, test in zip(result.agents, groups, tests):
        sol = group.inner_solve(agent.subspace)
        metrics = {
            "train_mse": _pooled_mtl_mse(agent.subspace, group, sol),
        }
        if test is not None and test.n_samples:
            metrics["test_nmse"] = nmse(agent.subspace, test, sol)
        if u_star is not None:
            metrics["subspace_error"] = subspace_error(agent.subspace, u_star)
        agents.append(metrics)
    frechet: dict = {}
    if result.frechet is not None:
        mean = result.frechet.subspace
        frechet["converged"] = bool(result.frechet.converged)
        scores = []
        for group, test in zip(groups, tests):
            if test is not None and test.n_samples:
                scores.append(nmse(mean, test, group.inner_solve(mean)))
        if scores:
            frechet["test_nmse"] = float(np.mean(scores))
        if u_star is not None:
            frechet["subspace_error"] = subspace_error(mean, u_star)
    consensus = tuple(float(d) for d in _trace_consensus(result))
    return RunSummary(
        tuple(agents), consensus, frechet, result.slots,
        dict(wall_clock or {}), dict(config or {}),
    )


def _pooled_mtl_mse(point, group: TaskGroup, sol: InnerSolution) -> float:
    from subgossip.problems import as_matrix

    B = as_matrix(point)
    sq_sum, count = 0.0, 0
    for t, (X, y) in enumerate(group.tasks):
        if y.size == 0:
            continue
        resid = X @ (B @ sol.coeffs[t]) - y
        sq_sum += float(np.sum(resid**2))
        count += y.size
    return sq_sum / count if count else 0.0


def _trace_consensus(result):
    if result.records:
        return result.records[-1].consensus
    points = [a.subspace for a in result.agents]
    out = []
    for a, b in zip(points, points[1:]):
        try:
            out.append(dist_sq(_span(a), _span(b)))
        except (SubspacesTooFar, RankDeficient):
            out.append(math.inf)
    return out


# ---------------------------------------------------------------------------
# Trace and summary files


def trace_header(n_agents: int) -> list[str]:
    head = ["slot", "gamma", "mode", "pair_or_group", "g_value"]
    head += [f"d_{i}" for i in range(1, n_agents)]
    head += [f"cost_{i}" for i in range(1, n_agents + 1)]
    return head


def write_trace(path, records, n_agents: int) -> None:
    """Write trace records as CSV: one row per slot, header always present.

    Floats use ``repr`` (shortest round-trip); consensus fields may be the
    sentinel ``inf``; cost fields are empty on non-cadence slots.
    """
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(trace_header(n_agents))
            for rec in records:
                row = [
                    str(rec.slot),
                    repr(float(rec.gamma)),
                    rec.mode,
                    rec.pair_or_group,
                    repr(float(rec.g_value)),
                ]
                row += [repr(float(d)) for d in rec.consensus]
                if rec.costs is None:
                    row += [""] * n_agents
                else:
                    row += [repr(float(c)) for c in rec.costs]
                writer.writerow(row)
    except OSError as exc:
        raise OSError(f"cannot write trace {path}: {exc}") from exc


def read_trace(path) -> list[TraceRecord]:
    """Parse a trace CSV back into records (exact float round-trip)."""
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise ValueError(f"trace {path} is empty")
            n_dist = sum(1 for name in header if name.startswith("d_"))
            n_cost = sum(1 for name in header if name.startswith("cost_"))
            if header != trace_header(n_dist + 1) or n_cost != n_dist + 1:
                raise ValueError(f"trace {path} has an unrecognized header")
            records = []
            for row in reader:
                consensus = tuple(float(v) for v in row[5:5 + n_dist])
                cost_fields = row[5 + n_dist:5 + n_dist + n_cost]
                costs = (
                    None
                    if all(v == "" for v in cost_fields)
                    else tuple(float(v) for v in cost_fields)
                )
                records.append(
                    TraceRecord(
                        int(row[0]), float(row[1]), row[2], row[3],
                        float(row[4]), consensus, costs,
                    )
                )
            return records
    except OSError as exc:
        raise OSError(f"cannot read trace {path}: {exc}") from exc


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return v if math.isfinite(v) else repr(v)
    return value


def write_summary(path, summary: RunSummary) -> None:
    """Serialize a summary as versioned, deterministically formatted JSON.

    Non-finite floats (e.g. ``inf`` consensus sentinels) are written as
    their string forms so the file stays strict JSON.
    """
    payload = {"schema_version": SCHEMA_VERSION}
    for f in fields(summary):
        payload[f.name] = _jsonable(getattr(summary, f.name))
    try:
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True, allow_nan=False)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write summary {path}: {exc}") from exc


def read_summary(path) -> dict:
    """Load a summary JSON, checking the schema version."""
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise OSError(f"cannot read summary {path}: {exc}") from exc
    version = payload.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(
            f"summary {path} has schema_version {version!r}, "
            f"expected {SCHEMA_VERSION}"
        )
    return payload
