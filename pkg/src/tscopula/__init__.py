"""Copula-based probabilistic prediction for masked multivariate time series."""

from ._kernels import BACKEND
from .backtest import BacktestSchedule, backtest
from .data import (
    CsvSchema,
    NormalizationState,
    TaskKind,
    TaskSpec,
    TimeSeriesWindow,
    Token,
    apply_task_mask,
    corrupt_unaligned,
    corrupt_uneven,
    de_standardize,
    gen_noisy_sines,
    load_csv,
    standardize,
)
from .flow import DSFParams, FlowEval, cdf_forward, cdf_inverse
from .metrics import MetricReport, crps, crps_sum, energy_score, newey_west_se
from .model import CopulaModel, ModelConfig
from .oracle import (
    ClaytonCopula,
    GroundTruthBivariate,
    clayton_density,
    ground_truth_nll,
    sample_ground_truth,
)
from .training import (
    StageConfig,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train_curriculum,
    train_joint_ablation,
)

__version__ = "0.1.0"

__all__ = [
    "apply_task_mask",
    "BACKEND",
    "backtest",
    "BacktestSchedule",
    "cdf_forward",
    "cdf_inverse",
    "clayton_density",
    "ClaytonCopula",
    "CopulaModel",
    "corrupt_unaligned",
    "corrupt_uneven",
    "crps",
    "crps_sum",
    "CsvSchema",
    "de_standardize",
    "DSFParams",
    "energy_score",
    "FlowEval",
    "gen_noisy_sines",
    "ground_truth_nll",
    "GroundTruthBivariate",
    "load_checkpoint",
    "load_csv",
    "MetricReport",
    "ModelConfig",
    "newey_west_se",
    "NormalizationState",
    "sample_ground_truth",
    "save_checkpoint",
    "StageConfig",
    "standardize",
    "TaskKind",
    "TaskSpec",
    "TimeSeriesWindow",
    "Token",
    "train_curriculum",
    "train_joint_ablation",
    "TrainConfig",
]
