"""Few-shot molecular property prediction with hypernetwork-generated,
property-aware adaptation of a GIN encoder and a relation-graph predictor."""

from .config import ModelConfig, Modulation, TrainConfig, desk_model
from .graphdata import Episode, LabeledGraph, MolecularGraph, Task, generate_synthetic_tasks, load_tasks, sample_episode
from .layers import ModelParams
from .meta import evaluate, maml_adapt, maml_train, run_episode, train
from .metrics import auprc, delta_auprc, roc_auc
from .model import LinearProbeNet, PaciaNet, episode_loss

__version__ = "0.1.0"

__all__ = [
    "auprc",
    "delta_auprc",
    "desk_model",
    "Episode",
    "episode_loss",
    "evaluate",
    "generate_synthetic_tasks",
    "LabeledGraph",
    "LinearProbeNet",
    "load_tasks",
    "maml_adapt",
    "maml_train",
    "ModelConfig",
    "ModelParams",
    "Modulation",
    "MolecularGraph",
    "PaciaNet",
    "roc_auc",
    "run_episode",
    "sample_episode",
    "Task",
    "train",
    "TrainConfig",
]
