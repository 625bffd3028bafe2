"""Binocular cross-attention ViT with a stochastic voting head, trained on
multi-rater soft labels, plus the calibration evaluation harness."""

from .data import (BinocularSample, DatasetFormatError, GeneratorConfig,
                   external_cohort_config, generate_dataset, read_dataset,
                   split, write_dataset)
from .losses import LabelError, LossBreakdown, loss_total
from .metrics import (CalibrationReport, DegenerateMetricWarning, EvalRecord,
                      MetricError, auroc, brier, ece, reliability_curve,
                      roc_curve)
from .model import (ModelConfig, ModelOutput, VoteBundle, VotingVit,
                    attention_map, predict_probability, vote)
from .tensor import (Adam, ConfigError, NumericOverflowError, Rng, Sgd,
                     ShapeError, Tensor, backward, no_grad, zero_grad)
from .train import (AblationRow, TrainConfig, TrainResult, TrainingDiverged,
                    evaluate, run_ablation, train)

__version__ = "0.1.0"

__all__ = [
    "Adam", "AblationRow", "BinocularSample", "CalibrationReport",
    "ConfigError", "DatasetFormatError", "DegenerateMetricWarning",
    "EvalRecord", "GeneratorConfig", "LabelError", "LossBreakdown",
    "MetricError", "ModelConfig", "ModelOutput", "NumericOverflowError",
    "Rng", "Sgd", "ShapeError", "Tensor", "TrainConfig", "TrainResult",
    "TrainingDiverged", "VoteBundle", "VotingVit", "attention_map", "auroc",
    "backward", "brier", "ece", "evaluate", "external_cohort_config",
    "generate_dataset", "loss_total", "no_grad", "predict_probability",
    "read_dataset", "reliability_curve", "roc_curve", "run_ablation",
    "split", "train", "vote", "write_dataset", "zero_grad",
]
