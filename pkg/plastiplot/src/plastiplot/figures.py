"""Figure and table generation from run artifacts.

All outputs are PNG images with the plotted numbers also written to a
companion CSV next to the image, so every figure can be audited without
rerunning anything.
"""

from __future__ import annotations

import csv
import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .artifacts import (  # noqa: E402
    ArtifactError,
    RunArtifacts,
    calcium_traces,
    check_matching_schedules,
    comm_table,
    phase_timings,
)


def _companion_csv_path(out_image: Path) -> Path:
    return out_image.with_suffix(".csv")


def plot_calcium(runs: list[RunArtifacts], out_image: str | Path) -> Path:
    """Calcium-versus-time traces, one line per neuron.

    With a single run one panel is drawn; with two (exact and frequency
    variants of the same experiment) the panels are stacked, first run
    on top.  The horizontal line marks the configured target calcium.
    Empty traces leave empty axes and raise after writing the figure.
    """
    out_image = Path(out_image)
    fig, axes = plt.subplots(len(runs), 1, figsize=(9, 3.2 * len(runs)),
                             sharex=True, squeeze=False)
    rows = []
    empty = False
    for panel, run in enumerate(runs):
        ax = axes[panel][0]
        traces = calcium_traces(run)
        if not traces:
            warnings.warn(f"no calcium rows in {run.path}", stacklevel=2)
            empty = True
        for nid in sorted(traces):
            points = traces[nid]
            ax.plot(points[:, 0], points[:, 1], linewidth=0.8)
            for step, value in points:
                rows.append((run.label, int(nid), int(step), value))
        ax.axhline(run.target_calcium, color="black", linestyle="--",
                   linewidth=1.2, label=f"target {run.target_calcium}")
        ax.set_ylabel("calcium")
        ax.set_title(f"{run.path.name} ({run.label})", fontsize=10)
        ax.legend(loc="lower right", fontsize=8)
    axes[-1][0].set_xlabel("step")
    fig.tight_layout()
    out_image.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_image, dpi=150)
    plt.close(fig)
    with open(_companion_csv_path(out_image), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "neuron_id", "step", "calcium"])
        writer.writerows(rows)
    if empty:
        raise ArtifactError("calcium data was empty; wrote empty axes")
    return out_image


def plot_timings(runs: list[RunArtifacts], out_image: str | Path) -> Path:
    """Per-phase mean times against rank count, one series per run label.

    Requires at least two runs with matching schedules so the comparison
    is meaningful; both axes are logarithmic.
    """
    if len(runs) < 2:
        raise ArtifactError("timing comparison needs at least two runs")
    check_matching_schedules(runs)
    out_image = Path(out_image)

    series: dict[tuple[str, str], list[tuple[int, float]]] = {}
    for run in runs:
        for phase, mean in phase_timings(run).items():
            series.setdefault((run.label, phase), []).append(
                (run.rank_count, mean))

    fig, ax = plt.subplots(figsize=(8, 5))
    rows = []
    for (label, phase), points in sorted(series.items()):
        points.sort()
        ranks = [p[0] for p in points]
        times = [max(p[1], 1e-12) for p in points]
        ax.plot(ranks, times, marker="o", label=f"{label}: {phase}")
        for r, t in points:
            rows.append((label, phase, r, t))
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("ranks")
    ax.set_ylabel("mean seconds per phase call")
    ax.legend(fontsize=8)
    fig.tight_layout()
    out_image.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_image, dpi=150)
    plt.close(fig)
    with open(_companion_csv_path(out_image), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "phase", "ranks", "mean_seconds"])
        writer.writerows(rows)
    return out_image


def table_bytes(runs: list[RunArtifacts], out_csv: str | Path) -> Path:
    """Bytes sent / remotely accessed per run, one row per rank count.

    Mirrors the shape of the communication tables: runs are grouped by
    algorithm/spike-mode label in the columns and by rank count in the
    rows; values are totals over all ranks of a run.
    """
    out_csv = Path(out_csv)
    labels = sorted({run.label for run in runs})
    cells: dict[tuple[int, str], tuple[int, int]] = {}
    for run in runs:
        table = comm_table(run)
        sent = sum(row["bytes_sent"] for row in table)
        remote = sum(row["bytes_remotely_accessed"] for row in table)
        cells[(run.rank_count, run.label)] = (sent, remote)

    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["ranks"]
        for label in labels:
            header.append(f"{label}:bytes_sent")
            header.append(f"{label}:bytes_remotely_accessed")
        writer.writerow(header)
        for ranks in sorted({r for r, _ in cells}):
            row: list = [ranks]
            for label in labels:
                sent, remote = cells.get((ranks, label), ("", ""))
                row.extend([sent, remote])
            writer.writerow(row)
    return out_csv
