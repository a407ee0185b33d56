"""Corrupted-modality detection via reconstruction error.

Scores are plain L2 distances between normalized inputs and their
reconstructions decoded from the full-modality posterior mean: one score for
rgb, one for depth, and one per reconstructed force dimension. Thresholds
are picked per score channel by maximizing Youden's J on a labeled
validation set (AUROC is reported as the calibration quality metric). Force
counts as corrupted when at least 2 of its 3 dimension scores exceed their
thresholds; among several flagged modalities the one farthest from its
train-set error statistics (largest z-score) is rejected.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .config import Config
from .env import WINDOW, WRENCH_DIM, Observation, Split
from .errors import ContractError
from .corruption import LEGAL_KINDS, apply, sample_spec
from .model import FORCE_RECON_DIMS, FusionModel, fuse_poe
from .numerics import Tensor

FORCE_VOTES_NEEDED = 2


# -- scoring -------------------------------------------------------------

def recon_scores(model: FusionModel, obs_arrays: dict) -> dict:
    """Batched reconstruction-error scores from posterior means.

    obs_arrays maps modality name to an (N, dim) array. Returns
    {"rgb": (N,), "depth": (N,), "force": (N, 3)}.
    """
    with nm.no_grad():
        batch = {m: Tensor(obs_arrays[m]) for m in ("rgb", "depth", "force", "proprio")}
        experts = model.encode_all(batch)
        code = fuse_poe(list(experts.values()))
        z = code.mean
        rgb_rec, _ = model.decode("rgb", z)
        depth_rec, _ = model.decode("depth", z)
        force_rec = model.decode("force", z)
    rgb_err = np.linalg.norm(obs_arrays["rgb"] - rgb_rec.data, axis=1)
    depth_err = np.linalg.norm(obs_arrays["depth"] - depth_rec.data, axis=1)
    force_in = obs_arrays["force"].reshape(-1, WINDOW, WRENCH_DIM)[:, :, :FORCE_RECON_DIMS]
    force_out = force_rec.data.reshape(-1, WINDOW, FORCE_RECON_DIMS)
    force_err = np.linalg.norm(force_in - force_out, axis=1)
    return {"rgb": rgb_err, "depth": depth_err, "force": force_err}


def recon_error(obs: Observation, model: FusionModel) -> dict:
    """Single-observation scores: rgb and depth floats, force (3,) array."""
    arrays = {
        "rgb": obs.rgb.reshape(1, -1),
        "depth": obs.depth.reshape(1, -1),
        "force": obs.force.reshape(1, -1),
        "proprio": obs.proprio.reshape(1, -1),
    }
    s = recon_scores(model, arrays)
    return {"rgb": float(s["rgb"][0]), "depth": float(s["depth"][0]),
            "force": s["force"][0]}


# -- AUROC and threshold selection ----------------------------------------

def auroc(clean_scores, corrupt_scores) -> float:
    """P(random corrupt score > random clean score), ties counted 1/2.

    Computed as the exact trapezoidal ROC area using integer tie-group
    counts, so it matches exhaustive pairwise counting bit for bit.
    """
    clean = np.asarray(clean_scores, dtype=np.float64).ravel()
    corrupt = np.asarray(corrupt_scores, dtype=np.float64).ravel()
    if clean.size == 0 or corrupt.size == 0:
        raise ContractError("auroc requires non-empty score lists")
    values = np.unique(np.concatenate([clean, corrupt]))[::-1]  # descending
    clean_sorted = np.sort(clean)
    corrupt_sorted = np.sort(corrupt)

    def counts(sorted_arr):
        hi = sorted_arr.size - np.searchsorted(sorted_arr, values, side="left")
        lo = sorted_arr.size - np.searchsorted(sorted_arr, values, side="right")
        return (hi - lo).astype(np.int64)

    c = counts(corrupt_sorted)   # corrupt ties per distinct value
    f = counts(clean_sorted)     # clean ties per distinct value
    tp_prev = np.concatenate([[0], np.cumsum(c)[:-1]])
    area2 = int(np.sum(f * (2 * tp_prev + c)))
    return 0.5 * area2 / (clean.size * corrupt.size)


def youden_threshold(clean_scores, corrupt_scores):
    """Threshold maximizing TPR - FPR under the rule score > threshold.

    Candidates are midpoints between consecutive distinct pooled scores;
    perfectly separated classes therefore get the midpoint of the gap.
    """
    clean = np.sort(np.asarray(clean_scores, dtype=np.float64).ravel())
    corrupt = np.sort(np.asarray(corrupt_scores, dtype=np.float64).ravel())
    if clean.size == 0 or corrupt.size == 0:
        raise ContractError("threshold calibration requires both classes")
    values = np.unique(np.concatenate([clean, corrupt]))
    if values.size == 1:
        return float(values[0]), 0.0
    cands = 0.5 * (values[:-1] + values[1:])
    tpr = 1.0 - np.searchsorted(corrupt, cands, side="right") / corrupt.size
    fpr = 1.0 - np.searchsorted(clean, cands, side="right") / clean.size
    j = tpr - fpr
    best = int(np.argmax(j))
    return float(cands[best]), float(j[best])


# -- threshold table ---------------------------------------------------------

@dataclass
class ThresholdTable:
    thresholds: dict      # {"rgb": float, "depth": float, "force": [3 floats]}
    means: dict           # train-set clean error means, same channels
    stds: dict
    aurocs: dict = field(default_factory=dict)
    config_hash: str = ""
    seed: int = 0

    def validate(self) -> None:
        try:
            chans = [self.thresholds["rgb"], self.thresholds["depth"],
                     *self.thresholds["force"]]
            stds = [self.stds["rgb"], self.stds["depth"], *self.stds["force"]]
        except (KeyError, TypeError):
            raise ContractError("threshold table is not calibrated") from None
        if len(self.thresholds["force"]) != FORCE_RECON_DIMS:
            raise ContractError("threshold table needs 3 force thresholds")
        if not all(np.isfinite(chans)):
            raise ContractError("threshold table has non-finite thresholds")
        if not all(s > 0 for s in stds):
            raise ContractError("threshold table has non-positive stds")

    def to_json(self) -> dict:
        return {"format": "crossmodal-thresholds-v1",
                "thresholds": self.thresholds, "means": self.means,
                "stds": self.stds, "aurocs": self.aurocs,
                "config_hash": self.config_hash, "seed": self.seed}

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ThresholdTable":
        path = Path(path)
        if not path.exists():
            raise ContractError(f"no threshold table at {path}")
        d = json.loads(path.read_text())
        if d.get("format") != "crossmodal-thresholds-v1":
            raise ContractError(f"unrecognized threshold table format in {path}")
        table = cls(thresholds=d["thresholds"], means=d["means"], stds=d["stds"],
                    aurocs=d.get("aurocs", {}), config_hash=d.get("config_hash", ""),
                    seed=d.get("seed", 0))
        table.validate()
        return table


def fit_table(train_scores: dict, val_clean: dict, val_corrupt: dict,
              config_hash: str = "", seed: int = 0) -> ThresholdTable:
    """Pure calibration from already-computed score sets.

    train_scores / val_clean carry {"rgb": (N,), "depth": (N,), "force": (N,3)};
    val_corrupt maps modality -> scores of that modality's corrupted copies.
    """
    for name, scores in val_corrupt.items():
        if scores["rgb"].size == 0:
            raise ContractError(f"no corrupted scores for modality '{name}'")
    thr_rgb, _ = youden_threshold(val_clean["rgb"], val_corrupt["rgb"]["rgb"])
    thr_depth, _ = youden_threshold(val_clean["depth"], val_corrupt["depth"]["depth"])
    thr_force = []
    force_aurocs = []
    for i in range(FORCE_RECON_DIMS):
        thr, _ = youden_threshold(val_clean["force"][:, i],
                                  val_corrupt["force"]["force"][:, i])
        thr_force.append(thr)
        force_aurocs.append(auroc(val_clean["force"][:, i],
                                  val_corrupt["force"]["force"][:, i]))
    aurocs = {
        "rgb": auroc(val_clean["rgb"], val_corrupt["rgb"]["rgb"]),
        "depth": auroc(val_clean["depth"], val_corrupt["depth"]["depth"]),
        "force_dims": force_aurocs,
        "force_avg": float(np.mean(force_aurocs)),
    }
    table = ThresholdTable(
        thresholds={"rgb": thr_rgb, "depth": thr_depth, "force": thr_force},
        means={"rgb": float(train_scores["rgb"].mean()),
               "depth": float(train_scores["depth"].mean()),
               "force": train_scores["force"].mean(axis=0).tolist()},
        stds={"rgb": float(train_scores["rgb"].std()),
              "depth": float(train_scores["depth"].std()),
              "force": train_scores["force"].std(axis=0).tolist()},
        aurocs=aurocs, config_hash=config_hash, seed=seed)
    table.validate()
    return table


def _split_arrays(split: Split) -> dict:
    return {m: split.obs[m] for m in ("rgb", "depth", "force", "proprio")}


def corrupt_split_arrays(split: Split, modality: str, stats, cfg: Config,
                         seed: int, kind: str | None = None) -> dict:
    """Corrupted copies of every frame in a split (uniform kinds, or one kind)."""
    from .env import RES  # local import to avoid cycle noise
    mod_tag = {"rgb": 1, "depth": 2, "force": 3}[modality]
    rng = np.random.default_rng(np.random.SeedSequence([0xCA1, seed, mod_tag]))
    out = {m: split.obs[m].copy() for m in ("rgb", "depth", "force", "proprio")}
    n = split.n_frames
    for i in range(n):
        obs = Observation(
            rgb=split.obs["rgb"][i].reshape(3, RES, RES),
            depth=split.obs["depth"][i].reshape(1, RES, RES),
            force=split.obs["force"][i].reshape(1, WINDOW, WRENCH_DIM),
            proprio=split.obs["proprio"][i],
            action=split.obs["action"][i],
        )
        spec = sample_spec(modality, rng, stats=stats, cfg=cfg)
        if kind is not None:
            while spec.kind != kind:
                spec = sample_spec(modality, rng, stats=stats, cfg=cfg)
        corrupted = apply(spec, obs)
        out["rgb"][i] = corrupted.rgb.ravel()
        out["depth"][i] = corrupted.depth.ravel()
        out["force"][i] = corrupted.force.ravel()
    return out


def calibrate(model: FusionModel, train_split: Split, val_split: Split,
              cfg: Config, log=None):
    """Score clean and corrupted validation copies, fit thresholds, and
    compute the per-corruption-kind AUROC breakdown.

    Returns (table, rows) where rows list per-kind AUROC records.
    """
    stats = model.norm_stats
    if stats is None:
        raise ContractError("model checkpoint carries no normalization stats")
    train_scores = recon_scores(model, _split_arrays(train_split))
    val_clean = recon_scores(model, _split_arrays(val_split))
    val_corrupt = {}
    for modality in ("rgb", "depth", "force"):
        arrays = corrupt_split_arrays(val_split, modality, stats, cfg, cfg.cal_seed)
        val_corrupt[modality] = recon_scores(model, arrays)
        if log:
            log(f"scored corrupted val copies for {modality}")
    table = fit_table(train_scores, val_clean, val_corrupt,
                      config_hash=cfg.config_hash(), seed=cfg.cal_seed)

    rows = []
    for modality, kinds in LEGAL_KINDS.items():
        for kind in kinds:
            arrays = corrupt_split_arrays(val_split, modality, stats, cfg,
                                          cfg.cal_seed + 1, kind=kind)
            s = recon_scores(model, arrays)
            if modality == "force":
                dims = [auroc(val_clean["force"][:, i], s["force"][:, i])
                        for i in range(FORCE_RECON_DIMS)]
                rows.append({"modality": modality, "kind": kind,
                             "auroc": float(np.mean(dims)),
                             "auroc_dims": [float(x) for x in dims]})
            else:
                rows.append({"modality": modality, "kind": kind,
                             "auroc": auroc(val_clean[modality], s[modality]),
                             "auroc_dims": []})
            if log:
                log(f"auroc[{modality}/{kind}] = {rows[-1]['auroc']:.3f}")
    return table, rows


# -- the detection rule ------------------------------------------------------

@dataclass
class DetectionResult:
    scores: dict                 # rgb/depth floats, force list of 3
    flags: dict                  # modality -> bool
    z_scores: dict               # flagged modality -> float
    rejected: str | None

    def to_json(self) -> dict:
        return {"scores": {"rgb": self.scores["rgb"], "depth": self.scores["depth"],
                           "force": list(self.scores["force"])},
                "flags": dict(self.flags), "z_scores": dict(self.z_scores),
                "rejected": self.rejected}


def detect(obs: Observation, model: FusionModel, table: ThresholdTable) -> DetectionResult:
    """Flag modalities whose reconstruction error exceeds calibration, and
    reject the single worst offender (largest z-score) if any."""
    table.validate()
    s = recon_error(obs, model)
    force_scores = np.asarray(s["force"], dtype=np.float64)
    force_thr = np.asarray(table.thresholds["force"], dtype=np.float64)
    flags = {
        "rgb": bool(s["rgb"] > table.thresholds["rgb"]),
        "depth": bool(s["depth"] > table.thresholds["depth"]),
        "force": bool(int((force_scores > force_thr).sum()) >= FORCE_VOTES_NEEDED),
    }
    z_scores = {}
    if flags["rgb"]:
        z_scores["rgb"] = (s["rgb"] - table.means["rgb"]) / table.stds["rgb"]
    if flags["depth"]:
        z_scores["depth"] = (s["depth"] - table.means["depth"]) / table.stds["depth"]
    if flags["force"]:
        dim_z = (force_scores - np.asarray(table.means["force"])) \
            / np.asarray(table.stds["force"])
        over = force_scores > force_thr
        z_scores["force"] = float(dim_z[over].max())
    flagged = [m for m in ("rgb", "depth", "force") if flags[m]]
    if not flagged:
        rejected = None
    elif len(flagged) == 1:
        rejected = flagged[0]
    else:
        rejected = flagged[int(np.argmax([z_scores[m] for m in flagged]))]
    return DetectionResult(scores={"rgb": s["rgb"], "depth": s["depth"],
                                   "force": force_scores.tolist()},
                           flags=flags, z_scores=z_scores, rejected=rejected)
