import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from plastiplot.artifacts import (
    ArtifactError,
    calcium_traces,
    check_matching_schedules,
    comm_table,
    load_run,
)
from plastiplot.cli import main as cli_main
from plastiplot.figures import plot_calcium, plot_timings, table_bytes

MANIFEST = """\
rank_count={ranks}
neurons_total=8
total_steps=1000
plasticity_interval=100
delta=100
algorithm={algo}
spike_mode={mode}
target_calcium=0.7
"""

COMM_HEADER = ("rank,bytes_sent,bytes_remotely_accessed,messages_sent,"
               "sync_points,activity_exchanges\n")


def make_run(root: Path, name: str, algo="classic", mode="exact", ranks=2,
             calcium_rows=None, comm_rows=None, timing_means=None) -> Path:
    run = root / name
    run.mkdir(parents=True)
    (run / "manifest.txt").write_text(
        MANIFEST.format(ranks=ranks, algo=algo, mode=mode))
    rows = calcium_rows if calcium_rows is not None else [
        (step, nid, 0.5) for step in (0, 100, 200) for nid in range(4)]
    with open(run / "calcium.csv", "w") as fh:
        fh.write("step,neuron_id,calcium\n")
        for step, nid, value in rows:
            fh.write(f"{step},{nid},{value}\n")
    comm = comm_rows if comm_rows is not None else [
        (r, 1000 + r, 0, 10, 20, 10) for r in range(ranks)]
    with open(run / "comm.csv", "w") as fh:
        fh.write(COMM_HEADER)
        for row in comm:
            fh.write(",".join(str(v) for v in row) + "\n")
    with open(run / "metrics.csv", "w") as fh:
        fh.write("step,synapse_count,bytes_sent,bytes_remotely_accessed,"
                 "messages_sent,sync_points\n")
        fh.write("0,0,0,0,0,0\n")
    means = timing_means or {"activity": 1e-4, "elements": 2e-4,
                             "connectivity": 3e-3}
    with open(run / "timings.csv", "w") as fh:
        fh.write("rank,phase,calls,total_seconds,mean_seconds\n")
        for phase, mean in means.items():
            for r in range(ranks):
                fh.write(f"{r},{phase},10,{mean * 10},{mean}\n")
            fh.write(f"all,{phase},{ranks},,{mean}\n")
    return run


class TestArtifacts:
    def test_missing_directory_is_named(self, tmp_path):
        with pytest.raises(ArtifactError, match="nowhere"):
            load_run(tmp_path / "nowhere")

    def test_missing_manifest(self, tmp_path):
        (tmp_path / "r").mkdir()
        with pytest.raises(ArtifactError, match="manifest"):
            load_run(tmp_path / "r")

    def test_wrong_header_is_reported(self, tmp_path):
        run = make_run(tmp_path, "r")
        (run / "calcium.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ArtifactError, match="columns"):
            calcium_traces(load_run(run))

    def test_schedule_mismatch_lists_keys(self, tmp_path):
        a = load_run(make_run(tmp_path, "a"))
        b = load_run(make_run(tmp_path, "b"))
        b.manifest["total_steps"] = "2000"
        b.manifest["delta"] = "50"
        with pytest.raises(ArtifactError) as err:
            check_matching_schedules([a, b])
        assert "total_steps" in str(err.value)
        assert "delta" in str(err.value)


class TestCalciumFigure:
    def test_flat_traces_render(self, tmp_path):
        run = load_run(make_run(tmp_path, "r"))
        out = plot_calcium([run], tmp_path / "fig.png")
        assert out.is_file()
        companion = (tmp_path / "fig.csv").read_text().splitlines()
        assert companion[0] == "run,neuron_id,step,calcium"
        assert len(companion) == 1 + 3 * 4

    def test_two_run_comparison_is_stacked(self, tmp_path):
        top = load_run(make_run(tmp_path, "exact", mode="exact"))
        bottom = load_run(make_run(tmp_path, "freq", mode="frequency"))
        out = plot_calcium([top, bottom], tmp_path / "two.png")
        labels = {line.split(",")[0] for line in
                  (tmp_path / "two.csv").read_text().splitlines()[1:]}
        assert labels == {"classic/exact", "classic/frequency"}
        assert out.stat().st_size > 0

    def test_empty_csv_warns_and_fails(self, tmp_path):
        run = load_run(make_run(tmp_path, "r", calcium_rows=[]))
        with pytest.warns(UserWarning, match="no calcium rows"):
            with pytest.raises(ArtifactError, match="empty"):
                plot_calcium([run], tmp_path / "empty.png")
        assert (tmp_path / "empty.png").is_file()  # empty axes still written

    def test_missing_columns_fail_descriptively(self, tmp_path):
        run = make_run(tmp_path, "r")
        (run / "calcium.csv").write_text("step,neuron\n")
        with pytest.raises(ArtifactError, match="calcium.csv"):
            plot_calcium([load_run(run)], tmp_path / "x.png")


class TestTimingsFigure:
    def test_needs_two_runs(self, tmp_path):
        run = load_run(make_run(tmp_path, "solo"))
        with pytest.raises(ArtifactError, match="two runs"):
            plot_timings([run], tmp_path / "t.png")

    def test_identical_runs_overlap(self, tmp_path):
        a = load_run(make_run(tmp_path, "a", algo="classic"))
        b = load_run(make_run(tmp_path, "b", algo="location_aware"))
        out = plot_timings([a, b], tmp_path / "t.png")
        assert out.is_file()
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "run,phase,ranks,mean_seconds"
        assert len(lines) == 1 + 6  # 2 runs x 3 phases

    def test_synthetic_double_ratio_lands_in_table(self, tmp_path):
        base = {"activity": 1e-4, "elements": 1e-4, "connectivity": 1e-3}
        doubled = {k: 2 * v for k, v in base.items()}
        a = load_run(make_run(tmp_path, "old", algo="classic",
                              timing_means=doubled))
        b = load_run(make_run(tmp_path, "new", algo="location_aware",
                              timing_means=base))
        plot_timings([a, b], tmp_path / "cmp.png")
        rows = [line.split(",") for line in
                (tmp_path / "cmp.csv").read_text().splitlines()[1:]]
        by_label = {}
        for label, phase, _ranks, mean in rows:
            by_label[(label, phase)] = float(mean)
        for phase in base:
            ratio = (by_label[("classic/exact", phase)]
                     / by_label[("location_aware/exact", phase)])
            assert ratio == pytest.approx(2.0)

    def test_mismatched_schedules_fail(self, tmp_path):
        a = load_run(make_run(tmp_path, "a"))
        b = load_run(make_run(tmp_path, "b"))
        b.manifest["plasticity_interval"] = "7"
        with pytest.raises(ArtifactError, match="plasticity_interval"):
            plot_timings([a, b], tmp_path / "t.png")


class TestBytesTable:
    def test_location_aware_remote_column_is_zero(self, tmp_path):
        aware = load_run(make_run(
            tmp_path, "aware", algo="location_aware", mode="frequency",
            comm_rows=[(0, 500, 0, 5, 9, 3), (1, 700, 0, 6, 9, 3)]))
        out = table_bytes([aware], tmp_path / "bytes.csv")
        lines = out.read_text().splitlines()
        assert len(lines) == 2  # header + one rank-count row
        header = lines[0].split(",")
        row = lines[1].split(",")
        remote_idx = header.index(
            "location_aware/frequency:bytes_remotely_accessed")
        assert row[remote_idx] == "0"

    def test_totals_recompute_from_comm_csv(self, tmp_path):
        rows = [(0, 123, 456, 1, 2, 3), (1, 877, 544, 1, 2, 3)]
        run = load_run(make_run(tmp_path, "r", comm_rows=rows))
        table_bytes([run], tmp_path / "bytes.csv")
        lines = (tmp_path / "bytes.csv").read_text().splitlines()
        header, row = lines[0].split(","), lines[1].split(",")
        # Oracle: re-sum the raw comm.csv.
        raw = comm_table(run)
        sent = sum(r["bytes_sent"] for r in raw)
        remote = sum(r["bytes_remotely_accessed"] for r in raw)
        assert int(row[header.index("classic/exact:bytes_sent")]) == sent == 1000
        assert int(row[header.index(
            "classic/exact:bytes_remotely_accessed")]) == remote == 1000


class TestCli:
    def test_calcium_command(self, tmp_path):
        make_run(tmp_path, "r")
        rc = cli_main(["calcium", "--runs", str(tmp_path / "r"),
                       "--out", str(tmp_path / "fig.png")])
        assert rc == 0
        assert (tmp_path / "fig.png").is_file()

    def test_missing_run_is_exit_one(self, tmp_path):
        rc = cli_main(["bytes", "--runs", str(tmp_path / "missing"),
                       "--out", str(tmp_path / "t.csv")])
        assert rc == 1


QUALITY_CONFIG = ("rank_count=4\nneurons_total=32\ntotal_steps=2000\n"
                  "plasticity_interval=100\ndelta=100\ntheta=0.3\n"
                  "algorithm=location_aware\nneuron_model=poisson\n"
                  "calcium_alpha=2e-4\ntarget_calcium=0.7\ngrowth_rate=1e-3\n"
                  "growth_curve=gaussian\ninput_scale=0.05\n"
                  "synaptic_strength=0.5625\nmaster_seed=2024\n"
                  "calcium_every=100\nmetrics_every=500\n")


@pytest.fixture(scope="module")
def quality_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("quality")
    cfg = root / "quality.cfg"
    cfg.write_text(QUALITY_CONFIG)
    for mode in ("exact", "freq"):
        subprocess.run(
            ["plastsim", "run", "--config", str(cfg), "--spikes", mode,
             "--out", str(root / mode)],
            check=True, capture_output=True)
    return root


@pytest.mark.skipif(shutil.which("plastsim") is None,
                    reason="simulator CLI not installed")
class TestAgainstSimulatorOutput:
    """Drives the real simulator CLI, then renders its artifacts.

    Uses the quality-experiment configuration at reduced length: the
    figure pipeline only cares about the artifact schema.
    """

    def test_two_panel_quality_figure(self, quality_runs, tmp_path):
        exact = load_run(quality_runs / "exact")
        freq = load_run(quality_runs / "freq")
        out = plot_calcium([exact, freq], tmp_path / "quality.png")
        assert out.is_file()
        labels = {line.split(",")[0] for line in
                  (tmp_path / "quality.csv").read_text().splitlines()[1:]}
        assert labels == {"location_aware/exact", "location_aware/frequency"}

    def test_bytes_table_zero_remote_for_aware(self, quality_runs, tmp_path):
        runs = [load_run(quality_runs / "exact"),
                load_run(quality_runs / "freq")]
        out = table_bytes(runs, tmp_path / "bytes.csv")
        lines = out.read_text().splitlines()
        header = lines[0].split(",")
        for line in lines[1:]:
            row = line.split(",")
            for i, col in enumerate(header):
                if col.endswith("bytes_remotely_accessed") and row[i]:
                    assert row[i] == "0"

    def test_regeneration_is_idempotent(self, quality_runs, tmp_path):
        exact = load_run(quality_runs / "exact")
        freq = load_run(quality_runs / "freq")
        a = tmp_path / "a.png"
        b = tmp_path / "b.png"
        plot_calcium([exact, freq], a)
        plot_calcium([exact, freq], b)
        assert a.read_bytes() == b.read_bytes()
        assert (tmp_path / "a.csv").read_bytes() == \
            (tmp_path / "b.csv").read_bytes()
