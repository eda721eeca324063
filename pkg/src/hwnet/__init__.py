"""Simulation and verification tools for many-server multiclass networks in the Halfin-Whitt regime."""
from .ctmc import (
    BoxGrid,
    CostSpec,
    SimulationResult,
    empirical_measure,
    event_rates,
    simulate_ctmc,
    tail_decay_fit,
    total_variation,
)
from .diffusion import (
    DiffusionModel,
    LyapunovSpec,
    build_diffusion_model,
    drift,
    fit_structural,
    generator_apply,
    search_structural,
    simulate_sde,
)
from .errors import *  # noqa: F401,F403
from .fluid import (
    DriftMatrices,
    FluidSolution,
    extract_drift_matrices,
    psi_drift,
    psi_map,
    solve_fluid,
)
from .policies import (
    CapacityShift,
    MarkovControl,
    Policy,
    bsp_decide,
    build_capacity_shift,
    canonical_jwc_decide,
    certify_jwc_region,
    concatenated_decide,
    jwc_region_test,
    make_bsp,
    make_canonical,
    make_concatenated,
    rounding_map,
)
from .topology import LimitParams, NetworkTopology, ScaledParams, scale_params, validate_topology
from .verify import (
    ConvergenceReport,
    LyapunovCertificate,
    check_discrete_lyapunov,
    check_jwc_stability_preservation,
    check_moment_bounds,
    convergence_experiment,
    fairness_report,
)

__version__ = "0.1.0"
