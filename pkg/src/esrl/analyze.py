"""Offline influence reports from a buffer export and a checkpoint.

Re-scores every exported transition under the checkpointed policy/critic,
then summarizes |c| by sample source (top/low percentile means) and bins the
retained vs clipped samples over the task workspace.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from . import influence as infl
from .replay import SOURCES, Transition, load_jsonl
from .rng import counter_normals, stream_key
from .sim import make_task
from .trainer import load_agents

TOP_PCTS = (2, 5, 10, 20, 50)
LOW_PCTS = (20, 10, 5, 2)


def _tail_mean(sorted_desc: np.ndarray, pct: float, top: bool) -> float:
    n = len(sorted_desc)
    k = max(1, math.ceil(pct * n / 100.0))
    block = sorted_desc[:k] if top else sorted_desc[-k:]
    return float(block.mean())


def source_table(abs_c: np.ndarray, sources: list[str]) -> dict:
    """Per-subset mean |c| of the top/low percent tails, Table-style."""
    subsets = {"all": np.ones(len(abs_c), dtype=bool)}
    for name in SOURCES:
        sel = np.asarray([s == name for s in sources])
        if sel.any():
            subsets[name] = sel
    table = {}
    for name, sel in subsets.items():
        vals = np.sort(abs_c[sel])[::-1]
        row = {f"top_{p}": _tail_mean(vals, p, top=True) for p in TOP_PCTS}
        row.update({f"low_{p}": _tail_mean(vals, p, top=False) for p in LOW_PCTS})
        row["mean"] = float(vals.mean())
        row["count"] = int(sel.sum())
        table[name] = row
    return table


def rescore(transitions: list[Transition], checkpoint: str | Path, k_draws: int | None = None, eta: float | None = None) -> dict:
    """Recompute c for every transition under the checkpointed agents."""
    if not transitions:
        raise ValueError("empty buffer export")
    policy, critic, temp, meta = load_agents(checkpoint)
    task = make_task(meta["task"])
    state_dim = int(meta["state_dim"])
    if transitions[0].state.shape != (state_dim,):
        raise ValueError(
            f"export has state dim {transitions[0].state.shape[0]}, checkpoint expects {state_dim}"
        )
    K = int(k_draws if k_draws is not None else meta.get("k_draws", 8))
    eta = float(eta if eta is not None else meta.get("actor_lr", 3e-4))
    alpha = float(meta.get("alpha", temp.alpha))

    states = np.stack([t.state for t in transitions])
    actions = np.stack([t.action for t in transitions])
    ids = np.asarray([t.id for t in transitions], dtype=np.uint64)
    key = stream_key(int(meta.get("seed", 0)), "influence")

    c = np.empty(len(transitions))
    chunk = 1024
    for lo in range(0, len(transitions), chunk):
        hi = min(lo + chunk, len(transitions))
        eps = counter_normals(key, ids[lo:hi], (K, policy.action_dim))
        c[lo:hi] = infl.score_batch(states[lo:hi], actions[lo:hi], policy, critic, alpha, eta, eps).c
    return {
        "c": c,
        "states": states,
        "sources": [t.source for t in transitions],
        "task": task,
        "meta": meta,
        "alpha": alpha,
        "eta": eta,
        "k_draws": K,
    }


def analyze(
    buffer_path: str | Path,
    checkpoint: str | Path,
    low_pct: float = 5.0,
    high_pct: float = 90.0,
    bins: int = 16,
    k_draws: int | None = None,
    eta: float | None = None,
) -> dict:
    """Full report: source table, selection bounds, workspace histograms."""
    transitions = load_jsonl(buffer_path)
    scored = rescore(transitions, checkpoint, k_draws=k_draws, eta=eta)
    c = scored["c"]
    abs_c = np.abs(c)
    bounds = infl.percentile_bounds(abs_c, low_pct, high_pct)
    mask = infl.selection_mask(c, bounds) > 0.5

    task = scored["task"]
    lo, hi = task.lo, task.hi
    tips = scored["states"][:, :2]

    def grid(points):
        h, _, _ = np.histogram2d(points[:, 0], points[:, 1], bins=bins, range=[[lo[0], hi[0]], [lo[1], hi[1]]])
        return h.astype(int).tolist()

    by_source = {}
    for name in SOURCES:
        sel = np.asarray([s == name for s in scored["sources"]])
        if sel.any():
            by_source[name] = {"retained": int((mask & sel).sum()), "clipped": int((~mask & sel).sum())}

    return {
        "task": task.name,
        "samples": len(c),
        "alpha": scored["alpha"],
        "eta": scored["eta"],
        "k_draws": scored["k_draws"],
        "bounds": {"lower": float(bounds.lower), "upper": float(bounds.upper), "low_pct": low_pct, "high_pct": high_pct},
        "retained_fraction": float(mask.mean()),
        "source_table": source_table(abs_c, scored["sources"]),
        "by_source": by_source,
        "workspace": [[float(lo[0]), float(lo[1])], [float(hi[0]), float(hi[1])]],
        "histogram_bins": bins,
        "retained_histogram": grid(tips[mask]),
        "clipped_histogram": grid(tips[~mask]),
    }


def render_text(report: dict) -> str:
    """Human-readable view of the per-source |c| distribution table."""
    cols = ["all", *[s for s in SOURCES if s in report["source_table"]]]
    rows = [f"task={report['task']} samples={report['samples']} retained={report['retained_fraction']:.3f} "
            f"bounds=[{report['bounds']['lower']:.3g}, {report['bounds']['upper']:.3g}]"]
    header = f"{'subset':>10} | " + " | ".join(f"{c:>14}" for c in cols)
    rows.append(header)
    rows.append("-" * len(header))
    for key in [f"top_{p}" for p in TOP_PCTS] + [f"low_{p}" for p in LOW_PCTS] + ["mean"]:
        cells = [f"{report['source_table'][c][key]:14.6g}" for c in cols]
        rows.append(f"{key:>10} | " + " | ".join(cells))
    return "\n".join(rows)


def write_report(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, indent=1))
