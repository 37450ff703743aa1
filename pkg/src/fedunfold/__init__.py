"""Federated learning with aggregation weights learned by unrolling the training rounds."""

from .data import Dataset, PartitionSpec, load_idx, partition, synth_blobs
from .fedsim import ClientProfile, FedConfig, run_federated
from .kernels import BACKEND
from .model import ModelParams, mlp_init
from .unfolding import MetaConfig, WeightSchedule, duw_train, schedule_init
from .weighting import make_strategy

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ClientProfile",
    "Dataset",
    "FedConfig",
    "MetaConfig",
    "ModelParams",
    "PartitionSpec",
    "WeightSchedule",
    "duw_train",
    "load_idx",
    "make_strategy",
    "mlp_init",
    "partition",
    "run_federated",
    "schedule_init",
    "synth_blobs",
]
