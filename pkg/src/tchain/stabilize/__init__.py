from .config import CorrectionConfig
from .correction import CorrectionReport, intensity_correct, sensitivity_weight, ssc_correct
from .rotation import (
    DegenerateRotationError,
    optimal_eigenvalues,
    rotate_pair,
    rotation_correct,
    rotation_matrices,
    rotation_sweep,
)
from .scqp import InfeasibleBoundError, ScqpProblem, ScqpResult, kkt_residual, scqp_solve
from .stiefel import StiefelResult, eigen_init, stiefel_minimize

__all__ = [
    "CorrectionConfig", "CorrectionReport", "DegenerateRotationError", "InfeasibleBoundError",
    "ScqpProblem", "ScqpResult", "StiefelResult", "eigen_init", "intensity_correct", "kkt_residual",
    "optimal_eigenvalues", "rotate_pair", "rotation_correct", "rotation_matrices", "rotation_sweep",
    "scqp_solve", "sensitivity_weight", "ssc_correct", "stiefel_minimize",
]
