"""Detect -> reject -> correct: produce the latent code a policy consumes.

When detection rejects a modality, the surviving experts are re-fused (the
product over any non-empty expert subset is well-defined), so the policy
receives a compensated code without retraining anything.
"""
from __future__ import annotations

from . import numerics as nm
from .detector import DetectionResult, ThresholdTable, detect
from .env import Observation
from .errors import ContractError
from .model import FusionModel, LatentCode, fuse_poe

MODES = ("full", "detect_correct", "no_correct")


def encode_with_missing(obs: Observation, model: FusionModel,
                        drop: str | None = None) -> LatentCode:
    """Fuse all modality experts except `drop` (plus the prior expert)."""
    if drop == "proprio":
        raise ContractError("proprioception is always present and cannot be dropped")
    if drop is not None and drop not in ("rgb", "depth", "force"):
        raise ContractError(f"unknown modality '{drop}'")
    with nm.no_grad():
        batch = model.obs_to_batch(obs)
        experts = model.encode_all(batch, skip=drop)
        return fuse_poe(list(experts.values()))


def compensate(obs: Observation, model: FusionModel,
               table: ThresholdTable | None, mode: str):
    """Returns (LatentCode, DetectionResult | None) for one observation.

    full / no_correct always fuse every modality (detection, when a table is
    available, is still computed for logging but never acted on);
    detect_correct drops the rejected modality, if any, before fusing.
    """
    if mode not in MODES:
        raise ContractError(f"unknown compensation mode '{mode}'")
    if mode == "detect_correct" and table is None:
        raise ContractError("detect_correct mode requires a calibrated threshold table")
    det = detect(obs, model, table) if table is not None else None
    drop = det.rejected if (mode == "detect_correct" and det is not None) else None
    return encode_with_missing(obs, model, drop=drop), det
