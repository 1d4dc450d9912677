"""Delimited reports and the matplotlib figures rendered alongside them.

Every report path writes a CSV first (the machine-readable artifact) and
then a PNG figure next to it. Figures use the Agg backend and strip
mutable metadata so repeated runs produce identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .searcher import Candidate

PARETO_COLUMNS = ("config", "error", "latency_ms", "daily_energy_mwh")
CANDIDATE_COLUMNS = ("config", "error", "latency_ms", "energy_mj",
                     "daily_energy_mwh", "feasible")


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty CSV")
    header = lines[0].split(",")
    return header, [ln.split(",") for ln in lines[1:]]


def encode_genes(candidate_or_genes) -> str:
    genes = (candidate_or_genes.encoding
             if isinstance(candidate_or_genes, Candidate) else candidate_or_genes)
    return "-".join(str(g) for g in genes)


def decode_genes(text: str) -> tuple[int, ...]:
    return tuple(int(g) for g in text.split("-"))


def write_candidates_csv(path, candidates):
    write_csv(path, CANDIDATE_COLUMNS,
              ((encode_genes(c), c.error, c.cost.latency_ms, c.cost.energy_mj,
                c.cost.daily_energy_mwh, int(c.feasible)) for c in candidates))


def write_pareto_csv(path, front):
    write_csv(path, PARETO_COLUMNS,
              ((encode_genes(c), c.error, c.cost.latency_ms,
                c.cost.daily_energy_mwh) for c in front))


def _pyplot():
    import matplotlib
    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, metadata={"Software": None})
    _pyplot().close(fig)


def loss_curve_figure(losses, path, title="training loss"):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(np.arange(len(losses)), losses, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def pareto_figure(candidates, front, path):
    """Error vs latency scatter, colored by daily energy; front highlighted."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4.5))
    if candidates:
        sc = ax.scatter([c.cost.latency_ms for c in candidates],
                        [100 * c.error for c in candidates],
                        c=[c.cost.daily_energy_mwh for c in candidates],
                        cmap="viridis", s=18, alpha=0.6)
        fig.colorbar(sc, ax=ax, label="daily energy (mWh)")
    if front:
        ordered = sorted(front, key=lambda c: c.cost.latency_ms)
        ax.plot([c.cost.latency_ms for c in ordered],
                [100 * c.error for c in ordered],
                "r-o", ms=5, lw=1.2, label="Pareto front")
        ax.legend()
    ax.set_xlabel("latency (ms)")
    ax.set_ylabel("error (%)")
    ax.set_title("error vs hardware cost")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def search_history_figure(history, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    gens = [h[0] for h in history]
    ax.plot(gens, [100 * h[1] for h in history], "-o", ms=3, label="best error")
    ax.plot(gens, [100 * h[2] for h in history], "--", alpha=0.7,
            label="population mean")
    ax.set_xlabel("generation")
    ax.set_ylabel("error (%)")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def tau_sweep_figure(rows, path):
    """rows: (tau, query_ratio, error) tuples."""
    plt = _pyplot()
    fig, ax1 = plt.subplots(figsize=(6, 3.5))
    taus = [r[0] for r in rows]
    ax1.plot(taus, [r[1] for r in rows], "b-o", ms=4, label="query ratio")
    ax1.set_xlabel("gate threshold")
    ax1.set_ylabel("query ratio", color="b")
    ax1.set_ylim(-0.05, 1.05)
    ax2 = ax1.twinx()
    ax2.plot(taus, [100 * r[2] for r in rows], "r-s", ms=4, label="error")
    ax2.set_ylabel("error (%)", color="r")
    ax1.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def format_search_report(best: Candidate, mode: str, evaluations: int,
                         constraints, front_size: int) -> str:
    lines = [
        "sub-network search report",
        f"  mode              : {mode}",
        f"  evaluations       : {evaluations}",
        f"  front size        : {front_size}",
        f"  budget latency    : {constraints.max_latency_ms} ms",
        f"  budget energy     : {constraints.max_daily_energy_mwh} mWh/day",
        f"  bottleneck theta  : {constraints.bottleneck_theta}",
        "best candidate",
        f"  config            : {best.config.describe()}",
        f"  genes             : {encode_genes(best)}",
        f"  error             : {best.error:.4f}",
        f"  latency           : {best.cost.latency_ms:.3f} ms",
        f"  energy            : {best.cost.energy_mj:.3f} mJ/inference",
        f"  daily energy      : {best.cost.daily_energy_mwh:.3f} mWh",
        f"  feasible          : {best.feasible}",
    ]
    return "\n".join(lines) + "\n"


def candidates_from_csv(path, space):
    """Rebuild lightweight candidates from a candidates CSV for re-filtering."""
    from .costmodel import CostEstimate
    from .space import SubnetConfig

    header, rows = read_csv(path)
    if list(header) != list(CANDIDATE_COLUMNS):
        raise ValueError(f"{path}: expected columns {','.join(CANDIDATE_COLUMNS)}")
    out = []
    for row in rows:
        genes = decode_genes(row[0])
        cfg = SubnetConfig.decode(space, genes)
        est = CostEstimate(latency_ms=float(row[2]), energy_mj=float(row[3]),
                           daily_energy_mwh=float(row[4]))
        out.append(Candidate(config=cfg, encoding=genes, error=float(row[1]),
                             cost=est, feasible=bool(int(row[5]))))
    return out
