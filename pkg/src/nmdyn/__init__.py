"""Newton-Maxwell dynamics of extended charges on a Fourier grid.

Layers, bottom up: ``geometry`` (k-space grid, polarization frames,
quadrature), ``state`` (phase-space points, norms, the free flow),
``interaction`` (form factors, potentials, the coupling terms and their
proved bounds), ``integrator`` (splitting schemes, trajectories,
divergence tracking), ``measures`` (sample ensembles, push-forward,
characteristic-equation and moment checks), ``cli`` (scenario configs and
verification suites).
"""

from .geometry import (
    KGrid,
    PolarizationBasis,
    build_kgrid,
    integrate_k,
    polarization_basis,
    transverse_frame,
)
from .state import (
    FieldState,
    ParticleSpec,
    ParticleState,
    PhaseSpacePoint,
    field_norm,
    free_flow,
    phase_norm,
    point_from_json,
    point_to_json,
    real_inner,
)
from .interaction import (
    FormFactor,
    HypothesisReport,
    PotentialSpec,
    characteristic_density_m,
    check_hypotheses,
    default_basis,
    grad_vector_potential,
    hamiltonian,
    nonlinearity_F,
    nonlinearity_G,
    potential,
    potential_gradient_bound,
    potential_value_bound,
    smeared_coulomb,
    vartheta,
    vector_potential,
)
from .integrator import (
    DivergenceReport,
    FlaggedHypothesesError,
    NumericalBlowupError,
    Trajectory,
    divergence_report,
    evolve,
    export_states_json,
    rk4_interaction_step,
    strang_step,
    trajectory_to_csv,
)
from .measures import (
    CharacteristicCheck,
    Ensemble,
    EnsemblePropagationError,
    MeasureSpec,
    MomentReport,
    characteristic_function,
    characteristic_residual,
    ensemble_to_csv,
    moment_report,
    push_forward,
    sample_measure,
)
from .cli import (
    CONFIG_SCHEMA,
    FORMAT_VERSION,
    ConfigError,
    ScenarioConfig,
    VerifyOutcome,
    load_config,
    reference_scenario,
    run_suite,
)

__version__ = "0.1.0"
