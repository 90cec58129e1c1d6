"""Loading and validation of simulator run directories.

A run directory is the simulator's output contract: ``manifest.txt``
(flat key=value), ``metrics.csv``, ``calcium.csv``, ``comm.csv``, and
``connectome.csv``.  Everything here reads those files and nothing
else, so figures are pure functions of the CSV inputs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ArtifactError(ValueError):
    """A run directory is missing data or violates the schema."""


_EXPECTED_HEADERS = {
    "calcium.csv": ["step", "neuron_id", "calcium"],
    "comm.csv": ["rank", "bytes_sent", "bytes_remotely_accessed",
                 "messages_sent", "sync_points", "activity_exchanges"],
    "metrics.csv": ["step", "synapse_count", "bytes_sent",
                    "bytes_remotely_accessed", "messages_sent",
                    "sync_points"],
}


@dataclass
class RunArtifacts:
    path: Path
    manifest: dict[str, str]

    @property
    def label(self) -> str:
        algo = self.manifest.get("algorithm", "?")
        mode = self.manifest.get("spike_mode", "?")
        return f"{algo}/{mode}"

    @property
    def rank_count(self) -> int:
        return int(self.manifest["rank_count"])

    @property
    def target_calcium(self) -> float:
        return float(self.manifest.get("target_calcium", "0.7"))


def load_run(path: str | Path) -> RunArtifacts:
    path = Path(path)
    if not path.is_dir():
        raise ArtifactError(f"run directory not found: {path}")
    manifest_path = path / "manifest.txt"
    if not manifest_path.is_file():
        raise ArtifactError(f"manifest missing in {path}")
    manifest = {}
    for lineno, line in enumerate(manifest_path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ArtifactError(
                f"{manifest_path}:{lineno}: expected key=value")
        key, _, value = line.partition("=")
        manifest[key.strip()] = value.strip()
    return RunArtifacts(path=path, manifest=manifest)


def read_csv(run: RunArtifacts, name: str) -> tuple[list[str], list[list[str]]]:
    csv_path = run.path / name
    if not csv_path.is_file():
        raise ArtifactError(f"{name} missing in {run.path}")
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ArtifactError(f"{csv_path} is empty") from None
        rows = list(reader)
    expected = _EXPECTED_HEADERS.get(name)
    if expected is not None and header != expected:
        raise ArtifactError(
            f"{csv_path} has columns {header}, expected {expected}")
    return header, rows


def calcium_traces(run: RunArtifacts) -> dict[int, np.ndarray]:
    """Per-neuron (step, calcium) arrays, steps ascending."""
    _, rows = read_csv(run, "calcium.csv")
    traces: dict[int, list[tuple[int, float]]] = {}
    for step, nid, value in rows:
        traces.setdefault(int(nid), []).append((int(step), float(value)))
    return {nid: np.array(sorted(points))
            for nid, points in traces.items()}


def comm_table(run: RunArtifacts) -> list[dict[str, int]]:
    header, rows = read_csv(run, "comm.csv")
    return [{key: int(value) for key, value in zip(header, row)}
            for row in rows]


def phase_timings(run: RunArtifacts) -> dict[str, float]:
    """Mean seconds per phase, averaged across ranks."""
    csv_path = run.path / "timings.csv"
    if not csv_path.is_file():
        raise ArtifactError(f"timings.csv missing in {run.path}")
    out: dict[str, float] = {}
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            if row["rank"] == "all":
                out[row["phase"]] = float(row["mean_seconds"])
    if not out:
        raise ArtifactError(f"{csv_path} has no aggregate rows")
    return out


SCHEDULE_KEYS = ("total_steps", "plasticity_interval", "delta",
                 "neurons_total", "neurons_per_rank")


def check_matching_schedules(runs: list[RunArtifacts]) -> None:
    """Runs being compared must share their schedule configuration."""
    reference = runs[0]
    mismatched = set()
    for other in runs[1:]:
        for key in SCHEDULE_KEYS:
            if other.manifest.get(key) != reference.manifest.get(key):
                mismatched.add(key)
    if mismatched:
        raise ArtifactError(
            "runs have mismatched schedules; differing keys: "
            + ", ".join(sorted(mismatched)))
