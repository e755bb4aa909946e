"""Command-line experiment runner.

Subcommands

``mc-synth``
    Generate a synthetic low-rank completion instance (optionally
    ill-conditioned via ``--cond``), shard its columns over the agents,
    run the engine, and evaluate train/test error.
``mc-file``
    The same pipeline on a triplet file (header ``m n``; 1-based
    ``i j v`` lines).  Without ``--test``, a random per-entry split is
    carved out of the training data.
``mtl-synth`` / ``mtl-file``
    Multitask runs on generated tasks or a directory of per-task files
    (header ``d_t m``; rows of features followed by the label).
``verify``
    Run the geometry/gradient/engine property suites and print one
    pass/fail line per property.

Every run writes ``trace.csv``, ``summary.json``, and ``config.json``
into ``--out`` and, unless ``--no-plots`` is given, renders PNG figures
next to them.  Rerunning with the flags recorded in ``config.json``
reproduces ``trace.csv`` byte for byte.

Exit codes: 0 success, 2 flag error, 3 runtime error, 4 verification
failure.  The stepsize defaults (``a = 0.1``, ``b = 0.01``) are plain
starting points — tune them per problem with ``--stepsize-a/b``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from subgossip import __version__
from subgossip.data import (
    gen_mc,
    gen_mc_illcond,
    gen_mtl,
    load_mc_triplets,
    load_mtl_dir,
    partition_columns,
    partition_tasks,
    partition_test,
    split_train_test,
)
from subgossip.gossip import GossipAbort, GossipConfig, run
from subgossip.metrics import (
    mc_run_summary,
    mtl_run_summary,
    write_summary,
    write_trace,
)

LAMBDA_MAX = 0.5


class FlagError(ValueError):
    """A flag value that argparse accepted but the domain rejects."""


def _add_engine_flags(parser: argparse.ArgumentParser, default_lam: float):
    g = parser.add_argument_group("engine")
    g.add_argument("--agents", type=int, default=6, metavar="N",
                   help="number of chain agents (default 6)")
    g.add_argument("--rho", type=float, default=1e3,
                   help="consensus weight (default 1e3)")
    g.add_argument("--stepsize-a", type=float, default=0.1, metavar="A",
                   help="stepsize numerator in a/(1+bk) (default 0.1)")
    g.add_argument("--stepsize-b", type=float, default=0.01, metavar="B",
                   help="stepsize decay in a/(1+bk) (default 0.01)")
    g.add_argument("--slots", type=int, default=None,
                   help="slot (or round) budget; default 200*(N-1) "
                        "stochastic, 400*N parallel")
    g.add_argument("--mode", choices=("stochastic", "parallel"),
                   default="stochastic")
    g.add_argument("--geometry", choices=("grassmann", "euclidean"),
                   default="grassmann")
    g.add_argument("--precon", action="store_true",
                   help="precondition pair gradients by (W^T W + rho I)^-1")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--reorth-every", type=int, default=100, metavar="K",
                   help="re-orthonormalize each agent every K updates")
    g.add_argument("--trace-cadence", type=int, default=10, metavar="K",
                   help="record per-agent costs every K slots")
    g.add_argument("--lam", type=float, default=default_lam,
                   help=f"inner regularization (default {default_lam})")
    g.add_argument("--rank", type=int, default=None,
                   help="learned subspace rank (default: generator rank "
                        "for synthetic runs)")
    g.add_argument("--out", type=Path, default=Path("out"),
                   help="output directory (default ./out)")
    g.add_argument("--no-plots", dest="plots", action="store_false",
                   help="skip PNG figure rendering")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="subgossip",
        description="Decentralized subspace learning over a gossip chain.",
    )
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mc-synth", help="synthetic matrix completion run")
    p.add_argument("--m", type=int, default=500)
    p.add_argument("--n", type=int, default=12000)
    p.add_argument("--r", type=int, default=5,
                   help="generator rank of the planted matrix")
    p.add_argument("--os", dest="os_ratio", type=float, default=6.0,
                   help="oversampling ratio fixing the observed-entry count")
    p.add_argument("--noise-sd", type=float, default=1e-6)
    p.add_argument("--cond", type=float, default=None,
                   help="condition number for an ill-conditioned spectrum")
    p.add_argument("--sigma-1", type=float, default=None,
                   help="largest singular value with --cond "
                        "(default sqrt(m*n))")
    p.add_argument("--test-fraction", type=float, default=0.2)
    _add_engine_flags(p, default_lam=0.0)

    p = sub.add_parser("mc-file", help="matrix completion from a triplet file")
    p.add_argument("--train", type=Path, required=True,
                   help="triplet file (header 'm n', lines 'i j v', 1-based)")
    p.add_argument("--test", type=Path, default=None,
                   help="held-out triplet file over the same matrix")
    p.add_argument("--test-fraction", type=float, default=0.2,
                   help="random split carved from --train when no --test")
    p.add_argument("--center", action="store_true",
                   help="subtract the training mean from all values")
    _add_engine_flags(p, default_lam=0.0)

    p = sub.add_parser("mtl-synth", help="synthetic multitask run")
    p.add_argument("--tasks", type=int, default=100)
    p.add_argument("--m", type=int, default=50)
    p.add_argument("--r", type=int, default=5,
                   help="generator rank of the shared subspace")
    p.add_argument("--d-min", type=int, default=10)
    p.add_argument("--d-max", type=int, default=50)
    p.add_argument("--noise-sd", type=float, default=0.1)
    p.add_argument("--test-fraction", type=float, default=0.0,
                   help="per-task held-out fraction (default 0: none)")
    _add_engine_flags(p, default_lam=0.0)

    p = sub.add_parser("mtl-file", help="multitask run from a task directory")
    p.add_argument("--data", type=Path, required=True,
                   help="directory of per-task files (header 'd_t m')")
    p.add_argument("--test-fraction", type=float, default=0.2)
    _add_engine_flags(p, default_lam=0.1)

    p = sub.add_parser("verify", help="run the property suites")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _gossip_config(args, n_agents: int) -> GossipConfig:
    slots = args.slots
    if slots is None:
        slots = 400 * n_agents if args.mode == "parallel" \
            else 200 * (n_agents - 1)
    try:
        return GossipConfig(
            n_agents=n_agents,
            rho=args.rho,
            stepsize_a=args.stepsize_a,
            stepsize_b=args.stepsize_b,
            max_slots=slots,
            mode=args.mode,
            geometry=args.geometry,
            precon=args.precon,
            seed=args.seed,
            reorth_every=args.reorth_every,
            cost_cadence=args.trace_cadence,
        )
    except ValueError as exc:
        raise FlagError(str(exc)) from exc


def _check_engine_flags(args):
    if not 0.0 <= args.lam <= LAMBDA_MAX:
        raise FlagError(f"--lam must be in [0, {LAMBDA_MAX}], got {args.lam}")
    if args.rank is not None and args.rank < 1:
        raise FlagError("--rank must be >= 1")
    if args.slots is not None and args.slots < 0:
        raise FlagError("--slots must be >= 0")
    fraction = getattr(args, "test_fraction", 0.0)
    if not 0.0 <= fraction < 1.0:
        raise FlagError("--test-fraction must be in [0, 1)")


def _config_echo(args, gossip: GossipConfig) -> dict:
    echo = {"command": args.command, "version": __version__}
    skip = {"command", "plots", "out"}
    for key, value in sorted(vars(args).items()):
        if key in skip:
            continue
        echo[key.replace("_", "-")] = (
            str(value) if isinstance(value, Path) else value
        )
    echo["slots"] = gossip.max_slots
    return echo


def _data_rng(seed: int) -> np.random.Generator:
    # Third child of the master seed; the engine consumes the first two.
    return np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[2])


def _emit_artifacts(args, gossip, result, summary, echo):
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_trace(out / "trace.csv", result.records, gossip.n_agents)
    write_summary(out / "summary.json", summary)
    with open(out / "config.json", "w") as fh:
        json.dump(echo, fh, indent=2, sort_keys=True)
        fh.write("\n")
    written = ["trace.csv", "summary.json", "config.json"]
    if args.plots:
        from subgossip.report import render_run_figures

        written += [p.name for p in render_run_figures(result.records, out)]
    return written


def _headline(summary) -> str:
    finite = [d for d in summary.consensus if np.isfinite(d)]
    parts = [f"slots={summary.slots}"]
    if finite:
        parts.append(f"max_d={max(finite):.3e}")
    keys = ("test_rmse", "test_rel_rmse", "test_nmse", "subspace_error",
            "train_mse")
    for key in keys:
        vals = [a[key] for a in summary.agents if key in a]
        if vals:
            parts.append(f"mean_{key}={float(np.mean(vals)):.4g}")
            break
    return "  ".join(parts)


def _run_mc(args) -> int:
    _check_engine_flags(args)
    timings = {}
    t0 = time.perf_counter()
    if args.command == "mc-synth":
        if args.m < 2 or args.n < 1 or not 1 <= args.r < args.m:
            raise FlagError("need m >= 2, n >= 1 and 1 <= r < m")
        rng = _data_rng(args.seed)
        try:
            if args.cond is not None:
                inst = gen_mc_illcond(
                    args.m, args.n, args.r, args.os_ratio, args.noise_sd,
                    rng, cond=args.cond, sigma_1=args.sigma_1,
                    test_fraction=args.test_fraction,
                )
            else:
                inst = gen_mc(
                    args.m, args.n, args.r, args.os_ratio, args.noise_sd,
                    rng, test_fraction=args.test_fraction,
                )
        except ValueError as exc:
            raise FlagError(str(exc)) from exc
        rank = args.rank if args.rank is not None else args.r
    else:
        if args.rank is None:
            raise FlagError("--rank is required for file-based runs")
        if args.center and args.test is not None:
            raise FlagError(
                "--center requires the built-in split (no --test file)")
        rank = args.rank
        inst = load_mc_triplets(args.train)
        if args.test is not None:
            test_inst = load_mc_triplets(args.test)
            if (test_inst.m, test_inst.n) != (inst.m, inst.n):
                raise ValueError(
                    f"test file shape {test_inst.m}x{test_inst.n} does not "
                    f"match train shape {inst.m}x{inst.n}"
                )
            inst = type(inst)(
                m=inst.m, n=inst.n, train=inst.train, test=test_inst.train,
            )
        elif args.test_fraction > 0.0:
            inst = split_train_test(
                inst, args.test_fraction, _data_rng(args.seed),
                center=args.center,
            )
    if not rank < inst.m:
        raise FlagError(f"--rank must be < m = {inst.m}")
    timings["data"] = time.perf_counter() - t0

    gossip = _gossip_config(args, args.agents)
    shards = partition_columns(inst, gossip.n_agents, lam=args.lam)
    tests = partition_test(inst, gossip.n_agents)
    result = run(gossip, shards, inst.m, rank)
    timings["run"] = result.seconds

    t0 = time.perf_counter()
    echo = _config_echo(args, gossip)
    echo["rank"] = rank
    summary = mc_run_summary(result, shards, tests, config=echo)
    timings["evaluate"] = time.perf_counter() - t0
    summary = dataclasses.replace(summary, wall_clock=dict(timings))
    written = _emit_artifacts(args, gossip, result, summary, echo)
    print(f"wrote {', '.join(written)} to {args.out}")
    print(_headline(summary))
    return 0


def _run_mtl(args) -> int:
    _check_engine_flags(args)
    timings = {}
    t0 = time.perf_counter()
    if args.command == "mtl-synth":
        if args.tasks < 1 or not 1 <= args.r < args.m:
            raise FlagError("need tasks >= 1 and 1 <= r < m")
        if not 1 <= args.d_min <= args.d_max:
            raise FlagError("need 1 <= d-min <= d-max")
        try:
            inst = gen_mtl(
                args.tasks, args.m, args.r, args.d_min, args.d_max,
                args.noise_sd, _data_rng(args.seed),
            )
        except ValueError as exc:
            raise FlagError(str(exc)) from exc
        rank = args.rank if args.rank is not None else args.r
    else:
        if args.rank is None:
            raise FlagError("--rank is required for file-based runs")
        rank = args.rank
        inst = load_mtl_dir(args.data)
    if not rank < inst.m:
        raise FlagError(f"--rank must be < m = {inst.m}")
    if args.test_fraction > 0.0:
        inst = split_train_test(
            inst, args.test_fraction, _data_rng(args.seed))
    timings["data"] = time.perf_counter() - t0

    gossip = _gossip_config(args, args.agents)
    groups = partition_tasks(inst, gossip.n_agents, lam=args.lam)
    test_groups = (
        partition_tasks(inst, gossip.n_agents, lam=args.lam, test=True)
        if inst.test_tasks is not None
        else None
    )
    result = run(gossip, groups, inst.m, rank)
    timings["run"] = result.seconds

    t0 = time.perf_counter()
    echo = _config_echo(args, gossip)
    echo["rank"] = rank
    summary = mtl_run_summary(
        result, groups, test_groups, u_star=inst.u_star, config=echo)
    timings["evaluate"] = time.perf_counter() - t0
    summary = dataclasses.replace(summary, wall_clock=dict(timings))
    written = _emit_artifacts(args, gossip, result, summary, echo)
    print(f"wrote {', '.join(written)} to {args.out}")
    print(_headline(summary))
    return 0


def _run_verify(args) -> int:
    from subgossip.verify import run_checks

    results = run_checks(seed=args.seed)
    return 0 if all(r.passed for r in results) else 4


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "verify":
            return _run_verify(args)
        if args.command in ("mc-synth", "mc-file"):
            return _run_mc(args)
        return _run_mtl(args)
    except FlagError as exc:
        print(f"error: flags: {exc}", file=sys.stderr)
        return 2
    except GossipAbort as exc:
        print(f"error: aborted: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"error: runtime: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
