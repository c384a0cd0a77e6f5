"""Decentralized bilevel optimization over simulated peer-to-peer networks.

INTERACT (full-gradient, gradient-tracked), SVR-INTERACT (variance-reduced),
and the GT-DSGD / D-SGD baselines, with exact verification on a synthetic
quadratic problem family whose inner solution is closed-form.
"""

from decbilevel.topology import (
    ConsensusMatrix,
    Graph,
    TopologyError,
    build_consensus_matrix,
    generate_er_graph,
    laplacian,
    spectral_gap,
)
from decbilevel.problems import (
    BilevelProblem,
    OracleError,
    ProblemConstants,
    SyntheticQuadratic,
)
from decbilevel.hypergradient import (
    DerivedConstants,
    StepSizes,
    bias_bound,
    derived_constants,
    hypergrad_full,
    hypergrad_stoch,
    stepsize_bounds,
)
from decbilevel.optimizers import AlgoConfig, NetworkState, Variant, init_state, run
from decbilevel.metrics import MetricsRecord, convergence_metric, potential

__version__ = "0.1.0"

__all__ = [
    "AlgoConfig",
    "BilevelProblem",
    "ConsensusMatrix",
    "DerivedConstants",
    "Graph",
    "MetricsRecord",
    "NetworkState",
    "OracleError",
    "ProblemConstants",
    "StepSizes",
    "SyntheticQuadratic",
    "TopologyError",
    "Variant",
    "bias_bound",
    "build_consensus_matrix",
    "convergence_metric",
    "derived_constants",
    "generate_er_graph",
    "hypergrad_full",
    "hypergrad_stoch",
    "init_state",
    "laplacian",
    "potential",
    "run",
    "spectral_gap",
    "stepsize_bounds",
]
