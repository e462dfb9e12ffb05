"""Static tables and plots from persisted runs."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .experiment import RunReport  # noqa: E402

if TYPE_CHECKING:
    from .ablation import AblationReport


def plot_stage_accuracy(reports: dict[str, RunReport], path: Path) -> Path:
    """Accuracy after each stage, one line per run."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, r in reports.items():
        xs = range(1, len(r.per_stage_accuracy) + 1)
        ax.plot(xs, r.per_stage_accuracy, marker="o", label=f"{label} (avg {r.average_accuracy:.1f})")
    ax.set_xlabel("stage")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_confusion(report: RunReport, path: Path) -> Path:
    """Module-selection matrix after the final stage, rows normalised per task."""
    m = report.confusion
    fig, ax = plt.subplots(figsize=(4, 3.6))
    rows = [[v / max(sum(r), 1) for v in r] for r in m]
    im = ax.imshow(rows, vmin=0, vmax=1, cmap="Blues")
    ax.set_xlabel("selected module")
    ax.set_ylabel("true task")
    if report.diagonal_fraction is not None:
        ax.set_title(f"diagonal fraction {report.diagonal_fraction:.2f}", fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_til_vs_cil(report: RunReport, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs = range(1, len(report.per_stage_accuracy) + 1)
    ax.plot(xs, report.per_stage_accuracy, marker="o", label="CIL (routed)")
    if report.til_per_stage:
        ax.plot(xs, report.til_per_stage, marker="s", label="TIL (task id given)")
    ax.set_xlabel("stage")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_ablation(rep: "AblationReport", path: Path) -> Path:
    """Bars of final and average accuracy per arm; module count on a twin axis for beta sweeps."""
    rows = rep.rows()
    labels = [str(r["value"]) for r in rows]
    xs = range(len(rows))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar([x - 0.2 for x in xs], [r["final_accuracy"] for r in rows], 0.4, label="final")
    ax.bar([x + 0.2 for x in xs], [r["average_accuracy"] for r in rows], 0.4, label="average")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels)
    ax.set_xlabel(rep.axis)
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8, loc="lower left")
    if rep.axis == "beta":
        ax2 = ax.twinx()
        ax2.plot(list(xs), [r["module_count"] for r in rows], color="k", marker="o")
        ax2.set_ylabel("modules")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def summary_table(reports: dict[str, RunReport], path: Optional[Path] = None) -> list[dict]:
    rows = []
    for label, r in reports.items():
        rows.append({
            "run": label,
            "method": r.method,
            "average_accuracy": round(r.average_accuracy, 4),
            "final_accuracy": round(r.final_accuracy, 4),
            "final_til": round(r.til_per_stage[-1], 4) if r.til_per_stage else "",
            "modules": r.module_count,
            "diagonal_fraction": "" if r.diagonal_fraction is None else round(r.diagonal_fraction, 4),
            "trainable_per_task": r.param_report.get("trainable_per_task"),
            "total_params": r.param_report.get("total_after_all_tasks"),
            "wall_time_s": round(r.wall_time, 1),
        })
    if path is not None and rows:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return rows


def format_table(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    width = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in cols}
    lines = ["  ".join(c.ljust(width[c]) for c in cols)]
    lines += ["  ".join(str(r[c]).ljust(width[c]) for c in cols) for r in rows]
    return "\n".join(lines)


def render_run(run_dir: Path, out_dir: Optional[Path] = None) -> list[Path]:
    """All plots for one persisted run."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir or run_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    r = RunReport.load(run_dir)
    made = [plot_stage_accuracy({run_dir.name: r}, out_dir / "stages.png")]
    if r.method == "pam":
        made.append(plot_til_vs_cil(r, out_dir / "til_vs_cil.png"))
        if r.confusion:
            made.append(plot_confusion(r, out_dir / "confusion.png"))
    return made
