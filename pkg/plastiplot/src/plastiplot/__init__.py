"""Figures and byte tables from structural-plasticity simulator runs."""

__version__ = "0.1.0"

from .artifacts import ArtifactError, RunArtifacts, load_run
from .figures import plot_calcium, plot_timings, table_bytes

__all__ = ["ArtifactError", "RunArtifacts", "load_run",
           "plot_calcium", "plot_timings", "table_bytes"]
