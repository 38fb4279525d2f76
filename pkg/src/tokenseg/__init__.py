"""Token-guided segmentation: concept tokens, dynamic kernels, consensus inference."""

from .backbone import EncoderConfig
from .config import ConfigError, RunConfig, dump_ini, load_run_config
from .consensus import ConsensusConfig, aggregate_views, infer_consensus
from .data import AugmentConfig, SynthConfig, SyntheticDataset, load_folder_dataset
from .geometry import GeometryDescriptor, extract_geometry
from .losses import LossWeights, boundary_weight, geo_loss, seg_loss, sem_loss, total_loss
from .model import ModelConfig, SegmentationModel, build_model
from .training import TrainConfig, collate, evaluate, fit

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "ConfigError",
    "ConsensusConfig",
    "EncoderConfig",
    "GeometryDescriptor",
    "LossWeights",
    "ModelConfig",
    "RunConfig",
    "SegmentationModel",
    "SynthConfig",
    "SyntheticDataset",
    "TrainConfig",
    "aggregate_views",
    "boundary_weight",
    "build_model",
    "collate",
    "dump_ini",
    "evaluate",
    "extract_geometry",
    "fit",
    "geo_loss",
    "infer_consensus",
    "load_folder_dataset",
    "load_run_config",
    "seg_loss",
    "sem_loss",
    "total_loss",
    "__version__",
]
