# conformal_risk/__init__.py

from .calibrate import (
    CalibrationResult, conformal_cvar_control, corc_bisect, crc_bisect, joint_lambda_t,
    lambda_hat_curve, tune_t,
)
from .conftr_task import ConfTrTask, ConfTrTaskConfig, conftr_demo
from .exceptions import (
    ConfigError, ConformalRiskError, DegenerateGradient, KinkAtSolution, SingularKKT,
    TieDetected,
)
from .grad import (
    LambdaGrad, ModelParams, conftr_quantile_grad, full_cost_grad, lambda_grad_joint,
    lambda_grad_kkt, lambda_grad_piecewise,
)
from .loss_models import BoundFn, LinearLoss, LossSet, ParamInterval, StepLoss, eval_loss
from .risk_core import (
    Disutility, RiskSpec, cvar_empirical, empirical_h, empirical_h_tilde, oce_risk_empirical,
    value_at_risk_empirical,
)
from .seg_task import SegTask, SegTaskConfig
from .storage_task import StorageTask, StorageTaskConfig
from .sweeps import SweepConfig, sweep
from .training import TrainConfig, TrainResult, fine_tune, sign_test, train, train_step
from .validation import TrialReport, bootstrap_se, validate_guarantee

__all__ = [
    "CalibrationResult", "crc_bisect", "corc_bisect", "conformal_cvar_control",
    "joint_lambda_t", "lambda_hat_curve", "tune_t",
    "LambdaGrad", "ModelParams", "lambda_grad_piecewise", "lambda_grad_kkt",
    "lambda_grad_joint", "conftr_quantile_grad", "full_cost_grad",
    "BoundFn", "LinearLoss", "LossSet", "ParamInterval", "StepLoss", "eval_loss",
    "Disutility", "RiskSpec", "cvar_empirical", "empirical_h", "empirical_h_tilde",
    "oce_risk_empirical", "value_at_risk_empirical",
    "SegTask", "SegTaskConfig", "StorageTask", "StorageTaskConfig",
    "ConfTrTask", "ConfTrTaskConfig", "conftr_demo",
    "TrainConfig", "TrainResult", "train", "train_step", "fine_tune", "sign_test",
    "TrialReport", "bootstrap_se", "validate_guarantee", "SweepConfig", "sweep",
    "ConformalRiskError", "ConfigError", "DegenerateGradient", "TieDetected",
    "KinkAtSolution", "SingularKKT",
]
