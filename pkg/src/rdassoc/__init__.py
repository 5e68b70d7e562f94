"""Single-snapshot multi-target localization from a linear range-Doppler
sensor array: geometry-gated graph association and baselines, with
bound-calibrated simulation and OSPA-style evaluation."""

from .baselines import (
    CandidateState,
    candidate_likelihood,
    edge_candidate_state,
    mcf_associate,
    nn_associate,
    saesl_associate,
)
from .fitting import (
    Chain,
    ChainFitTracker,
    DegenerateGeometryError,
    FitNormalization,
    StateFit,
    chain_log_likelihood,
    chain_state,
    feature_residual_error,
    fit_linear_features,
    fitting_error,
    gauss_newton_refine,
    predict_state,
    quadratic_log_likelihood,
)
from .metrics import (
    CrbReport,
    EvalReport,
    crb_position_velocity,
    crb_range_doppler,
    evaluate,
    expected_miss,
    fisher_information,
    localization_errors,
    ospa,
)
from .saga import (
    AssociationGraph,
    AssociationResult,
    SagaConfig,
    add_skip_edges,
    build_graph,
    ga_dfs,
    geometric_gate,
    initial_thresholds,
    saga_associate,
)
from .scene import (
    Detection,
    KinematicState,
    NoiseModel,
    ObservationSet,
    SceneBounds,
    SceneGenerationError,
    SensorArray,
    range_doppler_transform,
    simulate_observations,
    simulate_scene,
    state_distance,
    transform_jacobian,
)

__version__ = "0.1.0"
