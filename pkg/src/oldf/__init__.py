"""Parameter-optimized LinDistFlow approximations for radial distribution feeders."""

from .caseio import CaseFile, ParamFile, load_case, parse_case_json, parse_matpower_subset, read_params, write_params
from .distflow import solve_distflow, solve_distflow3, solve_distflow_batch
from .lindistflow import LdfParams, Ldf3Params, ldf3_voltages, ldf_voltages, nominal_h_blocks, nominal_params, oldf_voltages
from .network import RadialNetwork, ThreePhaseNetwork, TopologyConfig, apply_topology, enumerate_topologies, validate_radial
from .training import ScenarioSet, train

__version__ = "0.1.0"
