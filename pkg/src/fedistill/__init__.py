"""Communication-efficient federated distillation: FD, Mix2FLD and FRD simulators."""

from .estimators import FederatedDistillationClassifier
from .harness import ExperimentConfig, compare, run_experiment
from .nn import CROSS_ENTROPY, MSE, LossKind, Mlp

__all__ = [
    "CROSS_ENTROPY",
    "MSE",
    "ExperimentConfig",
    "FederatedDistillationClassifier",
    "LossKind",
    "Mlp",
    "compare",
    "run_experiment",
]
