"""Figure rendering for finished runs.

Renders the trace next to the delimited output: one figure for the
consensus distances along the chain and one for the per-agent local costs
on their recording cadence.  Uses the object-oriented matplotlib API with
the Agg canvas only, so rendering works in headless environments and
leaves no global state behind.
"""

from __future__ import annotations

import math
from pathlib import Path

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure


def _finite_series(slots, values):
    xs = [s for s, v in zip(slots, values) if math.isfinite(v)]
    ys = [v for v in values if math.isfinite(v)]
    return xs, ys


def render_consensus_figure(records, path) -> Path:
    """Plot every pairwise distance ``d_i`` against the slot index.

    Infinite sentinel values (undefined distances) are left out of the
    lines.  Writes a PNG and returns its path.
    """
    path = Path(path)
    fig = Figure(figsize=(7.0, 4.5))
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(111)
    if records:
        slots = [rec.slot for rec in records]
        n_pairs = len(records[0].consensus)
        for i in range(n_pairs):
            xs, ys = _finite_series(
                slots, [rec.consensus[i] for rec in records])
            ax.plot(xs, ys, label=f"$d_{{{i + 1}}}$", linewidth=1.2)
        if any(d > 0 for rec in records for d in rec.consensus
               if math.isfinite(d)):
            ax.set_yscale("log")
        ax.legend(loc="best", fontsize="small")
    ax.set_xlabel("slot")
    ax.set_ylabel("squared subspace distance")
    ax.set_title("consensus along the chain")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    return path


def render_cost_figure(records, path) -> Path:
    """Plot each agent's local cost at the slots where it was recorded."""
    path = Path(path)
    fig = Figure(figsize=(7.0, 4.5))
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(111)
    sampled = [rec for rec in records if rec.costs is not None]
    if sampled:
        slots = [rec.slot for rec in sampled]
        n_agents = len(sampled[0].costs)
        for i in range(n_agents):
            xs, ys = _finite_series(slots, [rec.costs[i] for rec in sampled])
            ax.plot(xs, ys, label=f"agent {i + 1}", linewidth=1.2)
        if all(y > 0 for rec in sampled for y in rec.costs):
            ax.set_yscale("log")
        ax.legend(loc="best", fontsize="small")
    ax.set_xlabel("slot")
    ax.set_ylabel("local cost")
    ax.set_title("per-agent local costs")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    return path


def render_run_figures(records, out_dir) -> list[Path]:
    """Render all run figures into ``out_dir``; returns the written paths."""
    out_dir = Path(out_dir)
    return [
        render_consensus_figure(records, out_dir / "consensus.png"),
        render_cost_figure(records, out_dir / "costs.png"),
    ]


def render_gamma_figure(records, path) -> Path:
    """Plot the realized stepsize schedule (diagnostic)."""
    path = Path(path)
    fig = Figure(figsize=(7.0, 3.0))
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(111)
    if records:
        ax.plot([rec.slot for rec in records],
                [rec.gamma for rec in records], linewidth=1.2)
    ax.set_xlabel("slot")
    ax.set_ylabel(r"$\gamma_k$")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    return path
