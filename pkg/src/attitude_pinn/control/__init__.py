from .hybrid import HybridConfig, HybridController, select_mode
from .linear import LinearModel, LinearMpc, box_qp, build_linear_model, kkt_residual
from .nonlinear import (ControlOutput, DynamicsError, MpcProblem, NonlinearMpc, PredictionModel,
                        default_q_diag, error_state, predict_step_analytic, predict_step_learned)

__all__ = [
    "ControlOutput", "DynamicsError", "HybridConfig", "HybridController", "LinearModel",
    "LinearMpc", "MpcProblem", "NonlinearMpc", "PredictionModel", "box_qp",
    "build_linear_model", "default_q_diag", "error_state", "kkt_residual",
    "predict_step_analytic", "predict_step_learned", "select_mode",
]
