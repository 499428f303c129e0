"""Evaluating and training models under covariate shift with omitted-variable sensitivity bounds."""

__version__ = "0.1.0"

from .bounds import (
    BootstrapCI,
    SensitivityBudget,
    SensitivityError,
    SensitivityEstimate,
    SensitivityRange,
    WorstCaseReport,
    benchmark_sensitivity,
    bootstrap_ci,
    infer_sensitivity,
    infer_sensitivity_range,
    ovb_bound,
    true_sensitivity,
    worst_case,
)
from .estimators import (
    DRRows,
    EvalReport,
    dr_general,
    dr_glm,
    evaluate,
    fidelity,
    ipw_loss,
    overlap,
    score_rows,
    unadjusted_loss,
)
from .glm import LossFamily, grad_nll_eta, log_partition, mean_param, nll
from .nuisance import (
    DensityRatioModel,
    FoldPlan,
    NuisanceSet,
    OutcomeModel,
    ShiftDataset,
    fit_density_ratio,
    fit_nuisances,
    fit_outcome,
    predict_outcome,
    predict_ratio,
    split_folds,
)
from .robust import (
    LinearModel,
    ObjectiveData,
    OptConfig,
    OptimizationError,
    OptTrace,
    fit,
    grad_objective,
    sweep,
    worst_case_objective,
)
from .synth import (
    OracleWorld,
    SynthConfig,
    enumerate_truth,
    oracle_binary,
    oracle_w1,
    sample,
    true_density_ratio,
)
