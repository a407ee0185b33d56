"""Multimodal insertion representation with corrupted-sensor detection and
crossmodal compensation."""

from .config import Config, load_config
from .detector import DetectionResult, ThresholdTable, auroc, calibrate, detect, recon_error
from .env import (DatasetBundle, EnvState, EpisodeRecord, Labels, NormStats,
                  Observation, PlanarInsertionEnv, generate_dataset,
                  load_dataset, make_unpaired, save_dataset)
from .errors import ContractError, DimensionError, NumericError
from .model import FusionModel, GaussianExpert, LatentCode, fuse_poe, reparameterize
from .numerics import Parameter, Tensor, adam_step, backward
from .pipeline import compensate, encode_with_missing
from .policy import Policy, bc_train, rollout_eval
from .training import Trainer, train

__version__ = "0.1.0"

__all__ = [
    "Config", "load_config",
    "DetectionResult", "ThresholdTable", "auroc", "calibrate", "detect", "recon_error",
    "DatasetBundle", "EnvState", "EpisodeRecord", "Labels", "NormStats",
    "Observation", "PlanarInsertionEnv", "generate_dataset", "load_dataset",
    "make_unpaired", "save_dataset",
    "ContractError", "DimensionError", "NumericError",
    "FusionModel", "GaussianExpert", "LatentCode", "fuse_poe", "reparameterize",
    "Parameter", "Tensor", "adam_step", "backward",
    "compensate", "encode_with_missing",
    "Policy", "bc_train", "rollout_eval",
    "Trainer", "train",
]
