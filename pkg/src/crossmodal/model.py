"""Multimodal latent variable model.

Each modality feeds a dense encoder emitting a diagonal Gaussian over the
latent space; experts are fused by a product of Gaussians together with a
unit prior expert (precisions add, means combine precision-weighted). Dense
decoders reconstruct every modality from the fused latent (images also get a
masked-region output, force only its first three dimensions), and auxiliary
heads predict action-conditional optical flow, next end-effector position,
next-step contact, and whether the inputs are paired.

Fusing any non-empty subset of experts is well-defined, which is what makes
dropping a corrupted modality at inference time structurally free.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nm
from .config import Config
from .env import RES, WINDOW, WRENCH_DIM, NormStats, Observation
from .errors import ContractError
from .numerics import Parameter, Tensor

MODALITIES = ("rgb", "depth", "force", "proprio")
DROPPABLE = ("rgb", "depth", "force")
MODALITY_DIMS = {
    "rgb": 3 * RES * RES,
    "depth": RES * RES,
    "force": WINDOW * WRENCH_DIM,
    "proprio": 6,
}
FORCE_RECON_DIMS = 3


@dataclass
class GaussianExpert:
    mean: Tensor       # (B, d)
    variance: Tensor   # (B, d), strictly positive
    modality: str | None = None


@dataclass
class LatentCode:
    mean: Tensor
    variance: Tensor
    sample: Tensor | None = None
    fused_modalities: frozenset = field(default_factory=frozenset)


def fuse_poe(experts: Sequence[GaussianExpert]) -> LatentCode:
    """Precision-weighted product of the experts and a unit Gaussian prior."""
    if len(experts) == 0:
        raise ContractError("fuse_poe requires at least one expert")
    precision_sum = None
    weighted_mean = None
    for e in experts:
        prec = 1.0 / e.variance
        term = e.mean * prec
        precision_sum = prec if precision_sum is None else precision_sum + prec
        weighted_mean = term if weighted_mean is None else weighted_mean + term
    precision_sum = precision_sum + 1.0  # prior expert: mean 0, variance 1
    variance = 1.0 / precision_sum
    mean = weighted_mean * variance
    tags = frozenset(e.modality for e in experts if e.modality is not None)
    return LatentCode(mean=mean, variance=variance, fused_modalities=tags)


def reparameterize(code: LatentCode, seed: int) -> LatentCode:
    """Draw sample = mean + sqrt(variance) * eps with a seeded eps stream."""
    rng = np.random.default_rng(np.random.SeedSequence([0x5A11, seed]))
    eps = rng.standard_normal(code.mean.shape)
    sample = code.mean + code.variance.sqrt() * Tensor(eps)
    return LatentCode(mean=code.mean, variance=code.variance, sample=sample,
                      fused_modalities=code.fused_modalities)


def _init_linear(rng: np.random.Generator, fan_in: int, fan_out: int):
    w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
    b = np.zeros(fan_out)
    return w, b


class FusionModel:
    def __init__(self, cfg: Config | None = None, seed: int | None = None,
                 norm_stats: NormStats | None = None,
                 robot_mask: np.ndarray | None = None):
        self.cfg = cfg or Config()
        self.latent_dim = self.cfg.latent_dim
        self.norm_stats = norm_stats
        self.robot_mask = robot_mask
        self.params: dict[str, Parameter] = {}
        self._build(self.cfg.model_seed if seed is None else seed)

    # -- construction ----------------------------------------------------

    def _add_chain(self, rng, prefix: str, dims: Sequence[int]) -> None:
        for i in range(len(dims) - 1):
            w, b = _init_linear(rng, dims[i], dims[i + 1])
            self.params[f"{prefix}_w{i}"] = Parameter(f"{prefix}_w{i}", w)
            self.params[f"{prefix}_b{i}"] = Parameter(f"{prefix}_b{i}", b)

    def _build(self, seed: int) -> None:
        d = self.latent_dim
        enc = list(self.cfg.enc_hidden)
        dec = list(self.cfg.dec_hidden)
        head = list(self.cfg.head_hidden)
        for k, m in enumerate(MODALITIES):
            rng = np.random.default_rng(np.random.SeedSequence([0x10DE, seed, k]))
            self._add_chain(rng, f"enc_{m}", [MODALITY_DIMS[m]] + enc + [2 * d])
        for k, m in enumerate(MODALITIES):
            rng = np.random.default_rng(np.random.SeedSequence([0xDEC0, seed, k]))
            self._add_chain(rng, f"dec_{m}", [d] + dec)
            out_dim = {"rgb": MODALITY_DIMS["rgb"], "depth": MODALITY_DIMS["depth"],
                       "force": WINDOW * FORCE_RECON_DIMS, "proprio": 6}[m]
            w, b = _init_linear(rng, dec[-1], out_dim)
            self.params[f"dec_{m}_full_w"] = Parameter(f"dec_{m}_full_w", w)
            self.params[f"dec_{m}_full_b"] = Parameter(f"dec_{m}_full_b", b)
            if m in ("rgb", "depth"):
                w, b = _init_linear(rng, dec[-1], out_dim)
                self.params[f"dec_{m}_mask_w"] = Parameter(f"dec_{m}_mask_w", w)
                self.params[f"dec_{m}_mask_b"] = Parameter(f"dec_{m}_mask_b", b)
        rng = np.random.default_rng(np.random.SeedSequence([0xEAD5, seed]))
        self._add_chain(rng, "head_flow", [d + 3] + head)
        w, b = _init_linear(rng, head[-1], 2 * RES * RES)
        self.params["head_flow_out_w"] = Parameter("head_flow_out_w", w)
        self.params["head_flow_out_b"] = Parameter("head_flow_out_b", b)
        w, b = _init_linear(rng, head[-1], RES * RES)
        self.params["head_flow_mask_w"] = Parameter("head_flow_mask_w", w)
        self.params["head_flow_mask_b"] = Parameter("head_flow_mask_b", b)
        self._add_chain(rng, "head_ee", [d + 3, 64, 3])
        self._add_chain(rng, "head_contact", [d + 3, 64, 1])
        self._add_chain(rng, "head_pair", [d, 64, 1])

    # -- forward ----------------------------------------------------------

    def _chain(self, prefix: str, x: Tensor, n_layers: int,
               final_linear: bool) -> Tensor:
        h = x
        for i in range(n_layers):
            h = h @ self.params[f"{prefix}_w{i}"].tensor + self.params[f"{prefix}_b{i}"].tensor
            if i < n_layers - 1 or not final_linear:
                h = h.relu()
        return h

    def encode(self, modality: str, x) -> GaussianExpert:
        """Map a (B, dim) batch of one modality to its Gaussian expert."""
        if modality not in MODALITIES:
            raise ContractError(f"unknown modality '{modality}'")
        x = x if isinstance(x, Tensor) else Tensor(x)
        expected = MODALITY_DIMS[modality]
        if x.data.ndim != 2 or x.shape[1] != expected:
            raise ContractError(
                f"encode '{modality}' expects (B, {expected}), got {x.shape}")
        n_layers = len(self.cfg.enc_hidden) + 1
        stats = self._chain(f"enc_{modality}", x, n_layers, final_linear=True)
        d = self.latent_dim
        mean = stats[:, :d]
        logvar = stats[:, d:].clip(-self.cfg.logvar_clamp, self.cfg.logvar_clamp)
        return GaussianExpert(mean=mean, variance=logvar.exp(), modality=modality)

    def encode_all(self, batch: dict, skip: str | None = None) -> dict:
        out = {}
        for m in MODALITIES:
            if m == skip:
                continue
            x = batch[m]
            if m == "force" and self.cfg.zero_force:
                x = Tensor(np.zeros_like(x.data if isinstance(x, Tensor) else x))
            out[m] = self.encode(m, x)
        return out

    def decode(self, modality: str, z: Tensor):
        """Reconstruct one modality from a latent batch.

        Images return (full, masked_region) rasters; force returns the
        (B, 32*3) reconstruction of the three force dimensions.
        """
        if modality not in MODALITIES:
            raise ContractError(f"unknown modality '{modality}'")
        trunk = self._chain(f"dec_{modality}", z, len(self.cfg.dec_hidden),
                            final_linear=False)
        full = trunk @ self.params[f"dec_{modality}_full_w"].tensor \
            + self.params[f"dec_{modality}_full_b"].tensor
        if modality in ("rgb", "depth"):
            masked = trunk @ self.params[f"dec_{modality}_mask_w"].tensor \
                + self.params[f"dec_{modality}_mask_b"].tensor
            return full, masked
        return full

    def predict_heads(self, z: Tensor, action) -> dict:
        action = action if isinstance(action, Tensor) else Tensor(action)
        za = nm.concat([z, action], axis=1)
        trunk = self._chain("head_flow", za, len(self.cfg.head_hidden),
                            final_linear=False)
        flow = trunk @ self.params["head_flow_out_w"].tensor + self.params["head_flow_out_b"].tensor
        flow_mask = trunk @ self.params["head_flow_mask_w"].tensor + self.params["head_flow_mask_b"].tensor
        ee = self._chain("head_ee", za, 2, final_linear=True)
        contact = self._chain("head_contact", za, 2, final_linear=True)
        pairing = self._chain("head_pair", z, 2, final_linear=True)
        return {"flow": flow, "flow_mask_logits": flow_mask, "ee_pos": ee,
                "contact_logit": contact, "pairing_logit": pairing}

    def pairing_logit(self, z: Tensor) -> Tensor:
        return self._chain("head_pair", z, 2, final_linear=True)

    # -- convenience -------------------------------------------------------

    def obs_to_batch(self, obs: Observation) -> dict:
        batch = {
            "rgb": obs.rgb.reshape(1, -1),
            "depth": obs.depth.reshape(1, -1),
            "force": obs.force.reshape(1, -1),
            "proprio": obs.proprio.reshape(1, -1),
        }
        return {k: Tensor(v) for k, v in batch.items()}

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def blob(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.params.values()])

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path, train_config_hash: str = "") -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        blob = self.blob()
        manifest = {
            "format": "crossmodal-checkpoint-v1",
            "latent_dim": self.latent_dim,
            "modalities": list(MODALITIES),
            "config": self.cfg.to_dict(),
            "train_config_hash": train_config_hash or self.cfg.config_hash(),
            "params": [[p.name, list(p.shape)] for p in self.params.values()],
            "blob_len": int(blob.size),
            "blob_sha256": hashlib.sha256(blob.astype("<f8").tobytes()).hexdigest(),
            "norm_stats": self.norm_stats.to_dict() if self.norm_stats else None,
            "robot_mask": (self.robot_mask.astype(int).tolist()
                           if self.robot_mask is not None else None),
        }
        path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
        blob.astype("<f8").tofile(path.with_suffix(".bin"))

    @classmethod
    def load(cls, path: str | Path) -> "FusionModel":
        path = Path(path)
        if not path.exists():
            raise ContractError(f"no checkpoint at {path}")
        manifest = json.loads(path.read_text())
        if manifest.get("format") != "crossmodal-checkpoint-v1":
            raise ContractError(f"unrecognized checkpoint format in {path}")
        cfg = Config(**{k: tuple(v) if isinstance(v, list) else v
                        for k, v in manifest["config"].items()})
        stats = NormStats.from_dict(manifest["norm_stats"]) if manifest["norm_stats"] else None
        mask = (np.asarray(manifest["robot_mask"], dtype=bool)
                if manifest["robot_mask"] is not None else None)
        model = cls(cfg, norm_stats=stats, robot_mask=mask)
        blob = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
        if blob.size != manifest["blob_len"]:
            raise ContractError("checkpoint blob length mismatch")
        offset = 0
        for name, shape in manifest["params"]:
            p = model.params[name]
            n = int(np.prod(shape)) if shape else 1
            p.tensor.data = blob[offset:offset + n].reshape(p.shape).copy()
            offset += n
        return model
