"""tenrec: joint completion and Tucker decomposition of dense tensors
under learned per-mode metrics, with a coupled tensor-matrix extension."""

from .core import (
    ObservationMask,
    TuckerModel,
    fold,
    frobenius_norm,
    hosvd,
    kron,
    kron_composite,
    mode_product,
    multi_mode_product,
    tucker_reconstruct,
    unfold,
)
from .coupled import (
    CoupledProblem,
    CoupledSolution,
    Coupling,
    coupled_solve,
    create_coupled,
    factor_congruence,
    reconstruction_error,
)
from .evaluate import EvalReport, fit, mask_random, rse
from .kempf_ness import (
    CoordinateChangeResult,
    covariance_whitener,
    dml_factors,
    normalize_coordinates,
)
from .metric import (
    MetricFamily,
    SimilarityMatrices,
    build_similarity,
    mahalanobis_distance,
    mahalanobis_via_trace,
    metric_from_factors,
    psd_floor,
)
from .prox import Penalty, prox
from .solver import (
    ConvergenceTrace,
    NumericError,
    SolveResult,
    SolverConfig,
    SolverState,
    augmented_lagrangian,
    grad_lagrangian_wrt,
    lower_gradients,
    residual_factor,
    residual_tensor,
    solve,
    transformed_estimate,
    update_core,
    update_duals,
    update_factor,
    update_metric_step,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
