"""Parametric sensor corruptions applied to single observations.

Kinds per modality: rgb gets box occlusion, brightness scaling, and in-plane
rotation; depth gets box occlusion and rotation; force gets window blackout
and additive Gaussian noise. Specs are self-contained (all sampled values
live in the spec), so apply() is a pure, deterministic function and never
touches a non-target modality.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .env import RES, WINDOW, WRENCH_DIM, NormStats, Observation
from .errors import ContractError

LEGAL_KINDS = {
    "rgb": ("box_occlusion", "brightness", "rotation"),
    "depth": ("box_occlusion", "rotation"),
    "force": ("blackout_force", "gauss_noise"),
}


@dataclass(frozen=True)
class CorruptionSpec:
    modality: str
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def to_json(self) -> dict:
        return {"modality": self.modality, "kind": self.kind,
                "params": {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                           for k, v in self.params.items()},
                "seed": self.seed}


def _require_legal(modality: str, kind: str) -> None:
    if modality not in LEGAL_KINDS:
        raise ContractError(f"no corruption kinds for modality '{modality}'")
    if kind not in LEGAL_KINDS[modality]:
        raise ContractError(f"kind '{kind}' is illegal for modality '{modality}'")


def sample_spec(modality: str, rng: np.random.Generator,
                stats: NormStats | None = None,
                cfg: Config | None = None) -> CorruptionSpec:
    """Uniformly pick a legal kind and draw its parameters."""
    cfg = cfg or Config()
    if modality not in LEGAL_KINDS:
        raise ContractError(f"no corruption kinds for modality '{modality}'")
    kinds = LEGAL_KINDS[modality]
    kind = kinds[int(rng.integers(len(kinds)))]
    seed = int(rng.integers(2**31 - 1))
    if kind == "box_occlusion":
        params = {
            "side": int(rng.integers(cfg.box_side_min, cfg.box_side_max + 1)),
            "offset_r": int(rng.integers(-cfg.box_jitter, cfg.box_jitter + 1)),
            "offset_c": int(rng.integers(-cfg.box_jitter, cfg.box_jitter + 1)),
        }
    elif kind == "brightness":
        params = {"factor": float(rng.uniform(cfg.brightness_lo, cfg.brightness_hi))}
    elif kind == "rotation":
        angle = float(rng.uniform(cfg.angle_lo, cfg.angle_hi))
        if rng.random() < 0.5:
            angle = -angle
        params = {"angle_deg": angle}
    elif kind == "blackout_force":
        if stats is None:
            raise ContractError("blackout_force sampling needs normalization stats")
        params = {"fill": stats.zero_wrench_encoding().tolist(),
                  "blackout_steps": cfg.blackout_steps}
    else:  # gauss_noise
        vars_ = list(cfg.noise_vars)
        params = {"var": float(vars_[int(rng.integers(len(vars_)))])}
    return CorruptionSpec(modality=modality, kind=kind, params=params, seed=seed)


def _rotate_nn(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Nearest-neighbor in-plane rotation about the raster center.

    img is (C, H, W); pixels sampled from outside the frame become 0.
    A zero angle is an exact identity.
    """
    c, h, w = img.shape
    theta = np.deg2rad(angle_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dr, dc = rows - cr, cols - cc
    src_r = np.rint(cos_t * dr + sin_t * dc + cr).astype(np.int64)
    src_c = np.rint(-sin_t * dr + cos_t * dc + cc).astype(np.int64)
    inside = (src_r >= 0) & (src_r < h) & (src_c >= 0) & (src_c < w)
    out = np.zeros_like(img)
    out[:, inside] = img[:, src_r[inside], src_c[inside]]
    return out


def _peg_pixel(obs: Observation) -> tuple[int, int]:
    """Locate the peg in pixel space from its red signature in the RGB raster."""
    red = (obs.rgb[0] > 0.8) & (obs.rgb[1] < 0.4)
    if not red.any():
        return RES // 2, RES // 2
    rows, cols = np.nonzero(red)
    return int(np.rint(rows.mean())), int(np.rint(cols.mean()))


def apply(spec: CorruptionSpec, obs: Observation) -> Observation:
    """Return a corrupted copy of obs; all other modalities are byte-identical."""
    _require_legal(spec.modality, spec.kind)
    out = obs.copy()
    if spec.kind == "box_occlusion":
        side = int(spec.params["side"])
        pr, pc = _peg_pixel(obs)
        center_r = pr + int(spec.params["offset_r"])
        center_c = pc + int(spec.params["offset_c"])
        r0 = max(0, center_r - side // 2)
        c0 = max(0, center_c - side // 2)
        r1 = min(RES, r0 + side)
        c1 = min(RES, c0 + side)
        target = out.rgb if spec.modality == "rgb" else out.depth
        target[:, r0:r1, c0:c1] = 0.0
    elif spec.kind == "brightness":
        out.rgb = np.clip(out.rgb * float(spec.params["factor"]), 0.0, 1.0)
    elif spec.kind == "rotation":
        if spec.modality == "rgb":
            out.rgb = _rotate_nn(out.rgb, float(spec.params["angle_deg"]))
        else:
            out.depth = _rotate_nn(out.depth, float(spec.params["angle_deg"]))
    elif spec.kind == "blackout_force":
        fill = np.asarray(spec.params["fill"], dtype=np.float64)
        if fill.shape != (WRENCH_DIM,):
            raise ContractError("blackout_force fill must have 6 entries")
        out.force = np.broadcast_to(fill, (1, WINDOW, WRENCH_DIM)).copy()
    elif spec.kind == "gauss_noise":
        rng = np.random.default_rng(np.random.SeedSequence([0xC0AA, spec.seed]))
        noise = rng.normal(0.0, np.sqrt(float(spec.params["var"])),
                           size=(1, WINDOW, WRENCH_DIM))
        out.force = np.clip(out.force + noise, -1.0, 1.0)
    return out


def spec_to_json_str(spec: CorruptionSpec) -> str:
    return json.dumps(spec.to_json(), sort_keys=True)
