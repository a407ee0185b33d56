"""Synthetic planar peg-insertion environment.

A unit-cube workspace with a square hole in a table plane at z=0.2. The peg
is a square prism moved by bounded (dx, dy, dz) displacements. Observations
pair a top-down RGB raster, a depth raster, a rolling window of force-torque
readings, and proprioception, with ground-truth labels for the
self-supervised objectives. A privileged scripted expert generates
demonstration episodes.

Modality information is split by construction: RGB is invariant to peg
height, only depth carries height, and only force carries contact.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config
from .errors import ContractError

RES = 32
Z_TABLE = 0.2
HOLE_HALF_WIDTH = 0.05
PEG_HALF_WIDTH = 0.04
ACTION_LIMIT = 0.02
SUCCESS_Z = 0.15
SUCCESS_TOL = 0.01
ALIGN_TOL = 0.005  # expert switches to descent inside this lateral error
WINDOW = 32
WRENCH_DIM = 6
DEPTH_MAX = 0.7
UNPAIRED_MIN_DIST = 0.15

OBS_FIELDS = (("rgb", 3 * RES * RES), ("depth", RES * RES), ("force", WINDOW * WRENCH_DIM),
              ("proprio", 6), ("action", 3))
LABEL_FIELDS = (("flow", 2 * RES * RES), ("flow_mask", RES * RES), ("ee_pos", 3),
                ("next_contact", 1), ("paired", 1))
RECORD_WIDTH = sum(w for _, w in OBS_FIELDS + LABEL_FIELDS)


@dataclass
class EnvState:
    peg_pos: np.ndarray            # (3,) workspace units
    peg_vel: np.ndarray            # (3,) wu per step
    hole_center: np.ndarray        # (2,)
    in_contact: bool
    step_index: int
    wrench_history: np.ndarray     # (WINDOW, 6), row -1 is the newest reading
    rng: np.random.Generator


@dataclass
class Observation:
    rgb: np.ndarray        # (3, 32, 32) in [0, 1]
    depth: np.ndarray      # (1, 32, 32) in [0, 1]
    force: np.ndarray      # (1, 32, 6) in [-1, 1]
    proprio: np.ndarray    # (6,) normalized
    action: np.ndarray     # (3,) displacement applied at this step

    def copy(self) -> "Observation":
        return Observation(self.rgb.copy(), self.depth.copy(), self.force.copy(),
                           self.proprio.copy(), self.action.copy())


@dataclass
class Labels:
    flow: np.ndarray           # (2, 32, 32) pixel displacement
    flow_mask: np.ndarray      # (1, 32, 32) bool, peg occupancy at t
    next_ee_pos: np.ndarray    # (3,)
    next_contact: bool
    paired: bool


@dataclass
class EpisodeRecord:
    observations: list
    labels: list
    success: bool
    horizon: int


class NormStats:
    """Train-split normalization: percentile clipping for force, min-max for
    proprioception. Degenerate (constant) dimensions fall back to
    pass-through with a warning."""

    def __init__(self, force_lo, force_hi, proprio_lo, proprio_hi):
        self.force_lo = np.asarray(force_lo, dtype=np.float64)
        self.force_hi = np.asarray(force_hi, dtype=np.float64)
        self.proprio_lo = np.asarray(proprio_lo, dtype=np.float64)
        self.proprio_hi = np.asarray(proprio_hi, dtype=np.float64)
        self.force_degenerate = (self.force_hi - self.force_lo) < 1e-12
        self.proprio_degenerate = (self.proprio_hi - self.proprio_lo) < 1e-12

    @classmethod
    def fit(cls, wrench_stream: np.ndarray, proprio_frames: np.ndarray) -> "NormStats":
        f_lo = np.percentile(wrench_stream, 3.0, axis=0)
        f_hi = np.percentile(wrench_stream, 97.0, axis=0)
        p_lo = proprio_frames.min(axis=0)
        p_hi = proprio_frames.max(axis=0)
        stats = cls(f_lo, f_hi, p_lo, p_hi)
        if stats.force_degenerate.any():
            dims = np.flatnonzero(stats.force_degenerate).tolist()
            warnings.warn(f"degenerate force percentile range on dims {dims}; "
                          "falling back to [-1, 1] pass-through")
        if stats.proprio_degenerate.any():
            dims = np.flatnonzero(stats.proprio_degenerate).tolist()
            warnings.warn(f"degenerate proprio range on dims {dims}; pass-through")
        return stats

    def normalize_force(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        lo, hi = self.force_lo, self.force_hi
        span = np.where(self.force_degenerate, 1.0, hi - lo)
        out = -1.0 + 2.0 * (np.clip(raw, lo, hi) - lo) / span
        return np.where(self.force_degenerate, np.clip(raw, -1.0, 1.0), out)

    def zero_wrench_encoding(self) -> np.ndarray:
        return self.normalize_force(np.zeros(WRENCH_DIM))

    def normalize_proprio(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        lo, hi = self.proprio_lo, self.proprio_hi
        span = np.where(self.proprio_degenerate, 1.0, hi - lo)
        out = np.clip((raw - lo) / span, 0.0, 1.0)
        return np.where(self.proprio_degenerate, raw, out)

    def denormalize_position(self, proprio_norm: np.ndarray) -> np.ndarray:
        """Recover raw peg position from the first 3 proprio dims."""
        lo, hi = self.proprio_lo[:3], self.proprio_hi[:3]
        span = np.where(self.proprio_degenerate[:3], 1.0, hi - lo)
        raw = proprio_norm[..., :3] * span + lo
        return np.where(self.proprio_degenerate[:3], proprio_norm[..., :3], raw)

    def to_dict(self) -> dict:
        return {
            "force_lo": self.force_lo.tolist(),
            "force_hi": self.force_hi.tolist(),
            "proprio_lo": self.proprio_lo.tolist(),
            "proprio_hi": self.proprio_hi.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(d["force_lo"], d["force_hi"], d["proprio_lo"], d["proprio_hi"])


class PlanarInsertionEnv:
    """Deterministic simulator; all stochasticity comes from the state rng."""

    def __init__(self, cfg: Config | None = None):
        self.cfg = cfg or Config()

    def reset(self, seed: int) -> EnvState:
        rng = np.random.default_rng(np.random.SeedSequence([0x5EED, seed]))
        peg = np.array([
            rng.uniform(0.2, 0.8),
            rng.uniform(0.2, 0.8),
            rng.uniform(0.5, 0.7),
        ])
        hole = np.array([rng.uniform(0.35, 0.65), rng.uniform(0.35, 0.65)])
        return EnvState(
            peg_pos=peg,
            peg_vel=np.zeros(3),
            hole_center=hole,
            in_contact=False,
            step_index=0,
            wrench_history=np.zeros((WINDOW, WRENCH_DIM)),
            rng=rng,
        )

    def step(self, state: EnvState, action: np.ndarray):
        """Apply a bounded displacement; returns (new_state, wrench, contact)."""
        cfg = self.cfg
        a = np.clip(np.asarray(action, dtype=np.float64), -ACTION_LIMIT, ACTION_LIMIT)
        pos0 = state.peg_pos
        new = np.clip(pos0 + a, 0.0, 1.0)
        cx, cy = state.hole_center
        rng = state.rng
        wrench = np.empty(WRENCH_DIM)
        contact = False

        crossing = pos0[2] >= Z_TABLE and new[2] < Z_TABLE
        offset = max(abs(new[0] - cx), abs(new[1] - cy))
        if crossing and offset + PEG_HALF_WIDTH > HOLE_HALF_WIDTH:
            penetration = Z_TABLE - new[2]
            new[2] = Z_TABLE
            contact = True
            wrench[2] = cfg.contact_stiffness * penetration + rng.normal(0.0, cfg.sensor_noise)
            wrench[0] = -cfg.friction_gain * a[0] + rng.normal(0.0, cfg.sensor_noise)
            wrench[1] = -cfg.friction_gain * a[1] + rng.normal(0.0, cfg.sensor_noise)
            wrench[3:6] = rng.normal(0.0, cfg.torque_noise, 3)
        else:
            k = cfg.free_field_gain
            wrench[0] = cfg.free_bias_fx - k * (new[0] - 0.5) + rng.normal(0.0, cfg.sensor_noise)
            wrench[1] = cfg.free_bias_fy - k * (new[1] - 0.5) + rng.normal(0.0, cfg.sensor_noise)
            wrench[2] = cfg.free_bias_fz - k * (new[2] - 0.5) + rng.normal(0.0, cfg.sensor_noise)
            wrench[3:6] = rng.normal(0.0, cfg.torque_noise, 3)
            if new[2] < Z_TABLE:
                # inside the hole the walls keep the peg footprint inside
                lim = HOLE_HALF_WIDTH - PEG_HALF_WIDTH
                new[0] = np.clip(new[0], cx - lim, cx + lim)
                new[1] = np.clip(new[1], cy - lim, cy + lim)

        history = np.vstack([state.wrench_history[1:], wrench])
        new_state = EnvState(
            peg_pos=new,
            peg_vel=new - pos0,
            hole_center=state.hole_center.copy(),
            in_contact=contact,
            step_index=state.step_index + 1,
            wrench_history=history,
            rng=rng,
        )
        return new_state, wrench, contact

    @staticmethod
    def is_success(state: EnvState) -> bool:
        cx, cy = state.hole_center
        x, y, z = state.peg_pos
        return z <= SUCCESS_Z and abs(x - cx) <= SUCCESS_TOL and abs(y - cy) <= SUCCESS_TOL

    # -- rendering -------------------------------------------------------

    def _axis_coverage(self, center: float, half_width: float) -> np.ndarray:
        """Per-cell occupancy of interval [center-hw, center+hw] along one axis."""
        if self.cfg.subpixel_render:
            edges = np.arange(RES + 1) / RES
            lo = np.maximum(edges[:-1], center - half_width)
            hi = np.minimum(edges[1:], center + half_width)
            return np.clip((hi - lo) * RES, 0.0, 1.0)
        centers = (np.arange(RES) + 0.5) / RES
        return (np.abs(centers - center) <= half_width).astype(np.float64)

    def _square(self, cx: float, cy: float, half_width: float) -> np.ndarray:
        # pixel (i, j) covers [j/RES, (j+1)/RES] x [i/RES, (i+1)/RES]
        return np.outer(self._axis_coverage(cy, half_width),
                        self._axis_coverage(cx, half_width))

    def render(self, state: EnvState):
        """Top-down orthographic rasters: (rgb (3,32,32), depth (1,32,32))."""
        cx, cy = state.hole_center
        px, py, pz = state.peg_pos
        hole = self._square(cx, cy, HOLE_HALF_WIDTH)
        peg = self._square(px, py, PEG_HALF_WIDTH)

        rgb = np.full((3, RES, RES), 0.6)
        rgb = rgb * (1.0 - hole) + 0.1 * hole
        peg_color = np.array([1.0, 0.1, 0.1]).reshape(3, 1, 1)
        rgb = rgb * (1.0 - peg) + peg_color * peg

        depth_raw = np.full((RES, RES), Z_TABLE)
        depth_raw = depth_raw * (1.0 - hole)
        depth_raw = depth_raw * (1.0 - peg) + pz * peg
        depth = np.clip(depth_raw / DEPTH_MAX, 0.0, 1.0)[None]
        return rgb, depth

    def peg_occupancy(self, state: EnvState) -> np.ndarray:
        """Boolean (32, 32) cell-center occupancy of the peg footprint."""
        centers = (np.arange(RES) + 0.5) / RES
        col = np.abs(centers - state.peg_pos[0]) <= PEG_HALF_WIDTH
        row = np.abs(centers - state.peg_pos[1]) <= PEG_HALF_WIDTH
        return np.outer(row, col)

    # -- scripted expert ---------------------------------------------------

    @staticmethod
    def expert_action(state: EnvState) -> np.ndarray:
        """Privileged controller: align over the hole center, then descend."""
        cx, cy = state.hole_center
        dx = cx - state.peg_pos[0]
        dy = cy - state.peg_pos[1]
        if abs(dx) > ALIGN_TOL or abs(dy) > ALIGN_TOL:
            a = np.array([dx, dy, 0.0])
        else:
            a = np.array([0.0, 0.0, -ACTION_LIMIT])
        return np.clip(a, -ACTION_LIMIT, ACTION_LIMIT)

    def observe(self, state: EnvState, action: np.ndarray, stats: NormStats) -> Observation:
        rgb, depth = self.render(state)
        force = stats.normalize_force(state.wrench_history)[None]
        proprio = stats.normalize_proprio(
            np.concatenate([state.peg_pos, state.peg_vel]))
        return Observation(rgb=rgb, depth=depth, force=force,
                           proprio=proprio, action=np.asarray(action, dtype=np.float64))


# -- dataset ----------------------------------------------------------------

@dataclass
class Split:
    obs: dict          # name -> (N, width) float64, already normalized
    labels: dict       # name -> (N, width) float64
    episodes: list     # [(start, length, success), ...]

    @property
    def n_frames(self) -> int:
        return self.obs["rgb"].shape[0]


@dataclass
class DatasetBundle:
    splits: dict
    stats: NormStats
    robot_mask: np.ndarray   # (RES*RES,) bool, OR of peg occupancy over train
    seed: int
    config_hash: str
    config: dict = field(default_factory=dict)


def _roll_episode(env: PlanarInsertionEnv, ep_seed: int, act_rng: np.random.Generator,
                  noise: float, horizon: int):
    """Run the expert with exploration noise; returns raw per-step records."""
    state = env.reset(ep_seed)
    frames = []
    success = False
    for _ in range(horizon):
        action = env.expert_action(state) + act_rng.normal(0.0, noise, 3)
        action = np.clip(action, -ACTION_LIMIT, ACTION_LIMIT)
        mask = env.peg_occupancy(state)
        rgb, depth = env.render(state)
        rec = {
            "pos": state.peg_pos.copy(),
            "vel": state.peg_vel.copy(),
            "window": state.wrench_history.copy(),
            "rgb": rgb,
            "depth": depth,
            "mask": mask,
            "action": action,
        }
        state, wrench, contact = env.step(state, action)
        rec["wrench"] = wrench
        rec["next_pos"] = state.peg_pos.copy()
        rec["next_contact"] = contact
        frames.append(rec)
        if env.is_success(state):
            success = True
            break
    return frames, success


def _assemble_split(episodes_raw: list, stats: NormStats) -> Split:
    obs = {name: [] for name, _ in OBS_FIELDS}
    labels = {name: [] for name, _ in LABEL_FIELDS}
    episodes = []
    start = 0
    for frames, success in episodes_raw:
        for rec in frames:
            obs["rgb"].append(rec["rgb"].ravel())
            obs["depth"].append(rec["depth"].ravel())
            obs["force"].append(stats.normalize_force(rec["window"]).ravel())
            obs["proprio"].append(stats.normalize_proprio(
                np.concatenate([rec["pos"], rec["vel"]])))
            obs["action"].append(rec["action"])
            disp = 32.0 * (rec["next_pos"][:2] - rec["pos"][:2])
            flow = np.zeros((2, RES, RES))
            flow[0][rec["mask"]] = disp[0]
            flow[1][rec["mask"]] = disp[1]
            labels["flow"].append(flow.ravel())
            labels["flow_mask"].append(rec["mask"].astype(np.float64).ravel())
            labels["ee_pos"].append(rec["next_pos"])
            labels["next_contact"].append([float(rec["next_contact"])])
            labels["paired"].append([1.0])
        episodes.append((start, len(frames), bool(success)))
        start += len(frames)
    obs = {k: np.asarray(v, dtype=np.float64) for k, v in obs.items()}
    labels = {k: np.asarray(v, dtype=np.float64) for k, v in labels.items()}
    return Split(obs=obs, labels=labels, episodes=episodes)


def generate_dataset(cfg: Config) -> DatasetBundle:
    """Expert-driven episodes split into train/val/test with train-fit stats."""
    if min(cfg.n_train, cfg.n_val, cfg.n_test) <= 0:
        raise ContractError("split sizes must be positive")
    env = PlanarInsertionEnv(cfg)
    raw = {}
    counts = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    for si, (split, count) in enumerate(counts.items()):
        rolls = []
        for ep in range(count):
            ep_seed = cfg.data_seed * 1_000_003 + si * 100_000 + ep
            act_rng = np.random.default_rng(
                np.random.SeedSequence([0xAC7, cfg.data_seed, si, ep]))
            rolls.append(_roll_episode(env, ep_seed, act_rng, cfg.expert_noise,
                                       cfg.horizon))
        raw[split] = rolls

    train_wrenches = np.concatenate(
        [[rec["wrench"] for rec in frames] for frames, _ in raw["train"]])
    train_proprio = np.concatenate(
        [[np.concatenate([rec["pos"], rec["vel"]]) for rec in frames]
         for frames, _ in raw["train"]])
    stats = NormStats.fit(train_wrenches, train_proprio)

    splits = {name: _assemble_split(eps, stats) for name, eps in raw.items()}
    robot_mask = splits["train"].labels["flow_mask"].any(axis=0)
    return DatasetBundle(splits=splits, stats=stats, robot_mask=robot_mask,
                         seed=cfg.data_seed, config_hash=cfg.config_hash(),
                         config=cfg.to_dict())


def make_unpaired(obs: Observation, pool: Split, stats: NormStats, seed: int,
                  max_draws: int = 1000):
    """Replace the sample's RGB with that of a far-away frame.

    Returns (new_observation, paired) where paired is always False. The
    replacement frame's end effector must be at least 0.15 wu away.
    """
    if pool.n_frames == 0:
        raise ContractError("unpaired pool is empty")
    rng = np.random.default_rng(np.random.SeedSequence([0x0DD, seed]))
    own_pos = stats.denormalize_position(obs.proprio)
    pool_pos = stats.denormalize_position(pool.obs["proprio"])
    for _ in range(max_draws):
        j = int(rng.integers(pool.n_frames))
        if np.linalg.norm(pool_pos[j] - own_pos) >= UNPAIRED_MIN_DIST:
            out = obs.copy()
            out.rgb = pool.obs["rgb"][j].reshape(3, RES, RES).copy()
            return out, False
    raise ContractError(
        f"no unpaired candidate at distance >= {UNPAIRED_MIN_DIST} after {max_draws} draws")


def unpaired_indices(positions: np.ndarray, idx: np.ndarray,
                     rng: np.random.Generator, max_draws: int = 1000) -> np.ndarray:
    """Batch variant of make_unpaired: replacement frame index per sample."""
    n = positions.shape[0]
    out = np.empty(len(idx), dtype=np.int64)
    for k, i in enumerate(idx):
        for _ in range(max_draws):
            j = int(rng.integers(n))
            if np.linalg.norm(positions[j] - positions[i]) >= UNPAIRED_MIN_DIST:
                out[k] = j
                break
        else:
            raise ContractError("no unpaired candidate found")
    return out


# -- persistence -------------------------------------------------------------

def save_dataset(bundle: DatasetBundle, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    field_order = [[n, w] for n, w in OBS_FIELDS + LABEL_FIELDS]
    manifest = {
        "format": "crossmodal-dataset-v1",
        "field_order": field_order,
        "record_width": RECORD_WIDTH,
        "splits": {
            name: {"frames": split.n_frames,
                   "episodes": [[s, l, bool(x)] for s, l, x in split.episodes]}
            for name, split in bundle.splits.items()
        },
        "stats": bundle.stats.to_dict(),
        "robot_mask": bundle.robot_mask.astype(int).tolist(),
        "seed": bundle.seed,
        "config_hash": bundle.config_hash,
        "config": bundle.config,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    for name, split in bundle.splits.items():
        rows = np.concatenate(
            [split.obs[n] for n, _ in OBS_FIELDS]
            + [split.labels[n] for n, _ in LABEL_FIELDS], axis=1)
        rows.astype("<f8").tofile(out / f"{name}.bin")


def load_dataset(data_dir: str | Path) -> DatasetBundle:
    root = Path(data_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ContractError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != "crossmodal-dataset-v1":
        raise ContractError(f"unrecognized dataset format in {manifest_path}")
    stats = NormStats.from_dict(manifest["stats"])
    splits = {}
    for name, meta in manifest["splits"].items():
        rows = np.fromfile(root / f"{name}.bin", dtype="<f8")
        rows = rows.reshape(meta["frames"], RECORD_WIDTH)
        obs, labels = {}, {}
        off = 0
        for fname, w in OBS_FIELDS:
            obs[fname] = rows[:, off:off + w].copy()
            off += w
        for fname, w in LABEL_FIELDS:
            labels[fname] = rows[:, off:off + w].copy()
            off += w
        splits[name] = Split(obs=obs, labels=labels,
                             episodes=[tuple(e) for e in meta["episodes"]])
    return DatasetBundle(
        splits=splits, stats=stats,
        robot_mask=np.asarray(manifest["robot_mask"], dtype=bool),
        seed=manifest["seed"], config_hash=manifest["config_hash"],
        config=manifest.get("config", {}))
