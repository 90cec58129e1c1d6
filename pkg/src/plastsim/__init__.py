"""Distributed structural-plasticity network simulator.

Neurons grow and retract synaptic elements toward a target calcium
level; partner search runs over a distributed spatial octree with either
classic remote-fetch Barnes-Hut or a location-aware variant that ships
the computation to the data, and cross-rank activity travels either as
exact sorted spike batches or as epoch-based firing frequencies.
"""

__version__ = "0.1.0"

from .config import SimConfig, load_config, parse_config_text
from .driver import init_network, run_simulation
from .neurons import (
    EXCITATORY,
    INHIBITORY,
    NeuronParams,
    NeuronState,
    SynapticElements,
    step_electrical,
    update_calcium,
    update_synaptic_elements,
    vacant_counts,
)
from .octree import (
    Domain,
    DomainAssignment,
    assign_subdomains,
    branch_level,
    morton_index,
)
from .plasticity import SearchConfig, acceptance, select_target
from .transport import CommStats

__all__ = [
    "SimConfig", "load_config", "parse_config_text",
    "init_network", "run_simulation",
    "EXCITATORY", "INHIBITORY", "NeuronParams", "NeuronState",
    "SynapticElements", "step_electrical", "update_calcium",
    "update_synaptic_elements", "vacant_counts",
    "Domain", "DomainAssignment", "assign_subdomains", "branch_level",
    "morton_index",
    "SearchConfig", "acceptance", "select_target",
    "CommStats",
]
