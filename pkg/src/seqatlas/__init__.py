"""Temporally-coherent surface reconstruction from point-cloud sequences.

A sequence of deforming point clouds is fit by a shared multi-patch
parametric surface whose per-frame shape is driven by a learned latent
code. A metric-consistency penalty keeps the 2D-to-3D parametrization
near-isometric across frames, which makes dense correspondence between
any two frames a matter of routing through the shared parameter domain.
"""

from .autodiff import GraphError, Node, NonFiniteError, Tape
from .correspondence import build_shared_samples, map_correspondence, project_nearest
from .data import PointCloudSequence, align_sequence, load_sequence, save_sequence
from .errors import DataError, NumericalError
from .metrics import EvalReport, corr_errors, evaluate_protocol, pck_auc
from .model import AtlasModel, ModelConfig
from .objectives import chamfer_distance, chamfer_loss, metric_consistency
from .synthetic import generate_synthetic
from .training import TrainConfig, train_sequence

__all__ = [
    "AtlasModel",
    "DataError",
    "EvalReport",
    "GraphError",
    "ModelConfig",
    "Node",
    "NonFiniteError",
    "NumericalError",
    "PointCloudSequence",
    "Tape",
    "TrainConfig",
    "align_sequence",
    "build_shared_samples",
    "chamfer_distance",
    "chamfer_loss",
    "corr_errors",
    "evaluate_protocol",
    "generate_synthetic",
    "load_sequence",
    "map_correspondence",
    "metric_consistency",
    "pck_auc",
    "project_nearest",
    "save_sequence",
    "train_sequence",
]

__version__ = "0.1.0"
