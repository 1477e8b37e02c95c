"""Test-time adaptation for graph classifiers by adversarial group
pseudo-positive contrastive learning, built on a small numpy autodiff."""
from .adapt import TrainConfig, TTAConfig, adapt, evaluate, offline_train
from .errors import GapgcError
from .experiments import ExperimentConfig, false_pseudo_label_probe, run_ablation, run_experiment, sweep_fraction
from .graphs import Graph, GraphBatch, ShiftProfile, generate_motif_ood_dataset
from .models import GinConfig, ModelBundle

__all__ = [
    "ExperimentConfig", "GapgcError", "GinConfig", "Graph", "GraphBatch", "ModelBundle", "ShiftProfile",
    "TTAConfig", "TrainConfig", "adapt", "evaluate", "false_pseudo_label_probe", "generate_motif_ood_dataset",
    "offline_train", "run_ablation", "run_experiment", "sweep_fraction",
]
__version__ = "0.1.0"
