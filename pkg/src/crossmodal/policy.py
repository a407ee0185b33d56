"""Gaussian policy on the frozen latent code, cloned from the scripted
expert, plus the rollout evaluator for the three test conditions.

The representation checkpoint is never updated here: latent means are
precomputed once with gradients disabled and the policy head is trained by
maximum likelihood on the recorded expert actions. Evaluation always acts
with the clipped mean action.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .config import Config
from .corruption import apply, sample_spec
from .detector import ThresholdTable
from .env import ACTION_LIMIT, PlanarInsertionEnv, DatasetBundle, Split
from .errors import ContractError
from .model import FusionModel, fuse_poe
from .numerics import Parameter, Tensor, adam_step, backward
from .pipeline import compensate

CONDITIONS = ("normal", "compensated", "not_compensated")
LOG2PI = float(np.log(2.0 * np.pi))


class Policy:
    """Two tanh hidden layers -> action mean; state-independent log-std."""

    def __init__(self, cfg: Config | None = None, seed: int | None = None):
        self.cfg = cfg or Config()
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng(
            np.random.SeedSequence([0xAC70, self.cfg.policy_seed if seed is None else seed]))
        dims = [self.cfg.latent_dim, *self.cfg.policy_hidden, 3]
        for i in range(len(dims) - 1):
            w = rng.standard_normal((dims[i], dims[i + 1])) / np.sqrt(dims[i])
            self.params[f"pi_w{i}"] = Parameter(f"pi_w{i}", w)
            self.params[f"pi_b{i}"] = Parameter(f"pi_b{i}", np.zeros(dims[i + 1]))
        self.params["pi_log_std"] = Parameter("pi_log_std", np.zeros(3))

    def forward(self, z: Tensor):
        n_layers = len(self.cfg.policy_hidden) + 1
        h = z
        for i in range(n_layers):
            h = h @ self.params[f"pi_w{i}"].tensor + self.params[f"pi_b{i}"].tensor
            if i < n_layers - 1:
                h = h.tanh()
        log_std = self.params["pi_log_std"].tensor.clip(
            self.cfg.log_std_min, self.cfg.log_std_max)
        return h, log_std

    def nll(self, z: Tensor, actions: Tensor) -> Tensor:
        mu, log_std = self.forward(z)
        inv_var = (-2.0 * log_std).exp()
        quad = ((actions - mu).square() * inv_var).sum(axis=1)
        return (0.5 * quad).mean() + log_std.sum() + 1.5 * LOG2PI

    def act(self, code) -> np.ndarray:
        """Deterministic evaluation: clipped mean action for one latent code."""
        with nm.no_grad():
            z = code.mean if isinstance(code.mean, Tensor) else Tensor(code.mean)
            mu, _ = self.forward(z)
        return np.clip(mu.data.reshape(3), -ACTION_LIMIT, ACTION_LIMIT)

    def parameters(self):
        return list(self.params.values())

    def blob(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.params.values()])

    def save(self, path: str | Path, rep_hash: str = "") -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        blob = self.blob()
        manifest = {
            "format": "crossmodal-policy-v1",
            "config": self.cfg.to_dict(),
            "params": [[p.name, list(p.shape)] for p in self.params.values()],
            "blob_len": int(blob.size),
            "blob_sha256": hashlib.sha256(blob.astype("<f8").tobytes()).hexdigest(),
            "rep_checkpoint_sha256": rep_hash,
        }
        path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
        blob.astype("<f8").tofile(path.with_suffix(".bin"))

    @classmethod
    def load(cls, path: str | Path) -> "Policy":
        path = Path(path)
        if not path.exists():
            raise ContractError(f"no policy at {path}")
        manifest = json.loads(path.read_text())
        if manifest.get("format") != "crossmodal-policy-v1":
            raise ContractError(f"unrecognized policy format in {path}")
        cfg = Config(**{k: tuple(v) if isinstance(v, list) else v
                        for k, v in manifest["config"].items()})
        policy = cls(cfg)
        blob = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
        if blob.size != manifest["blob_len"]:
            raise ContractError("policy blob length mismatch")
        offset = 0
        for name, shape in manifest["params"]:
            p = policy.params[name]
            n = int(np.prod(shape)) if shape else 1
            p.tensor.data = blob[offset:offset + n].reshape(p.shape).copy()
            offset += n
        return policy


def latent_means(model: FusionModel, split: Split, batch: int = 256) -> np.ndarray:
    """Full-modality posterior means for every frame, gradients disabled."""
    out = []
    with nm.no_grad():
        for lo in range(0, split.n_frames, batch):
            sl = slice(lo, min(lo + batch, split.n_frames))
            tensors = {m: Tensor(split.obs[m][sl])
                       for m in ("rgb", "depth", "force", "proprio")}
            experts = model.encode_all(tensors)
            out.append(fuse_poe(list(experts.values())).mean.data)
    return np.concatenate(out, axis=0)


def bc_train(bundle: DatasetBundle, model: FusionModel, cfg: Config,
             policy_path: str | Path | None = None, log=None):
    """Behavior cloning on the frozen representation.

    Returns (policy, history) where history rows carry per-epoch mean train
    and validation NLL of the expert actions.
    """
    train = bundle.splits["train"]
    val = bundle.splits["val"]
    if train.n_frames == 0:
        raise ContractError("training split is empty")
    z_train = latent_means(model, train)
    z_val = latent_means(model, val)
    a_train = train.obs["action"]
    a_val = val.obs["action"]

    policy = Policy(cfg)
    history = []
    n = z_train.shape[0]
    for epoch in range(cfg.policy_epochs):
        rng = np.random.default_rng(
            np.random.SeedSequence([0xBC17, cfg.policy_seed, epoch]))
        order = rng.permutation(n)
        n_batches = max(1, n // cfg.batch)
        train_nll = 0.0
        for b in range(n_batches):
            idx = order[b * cfg.batch:(b + 1) * cfg.batch]
            loss = policy.nll(Tensor(z_train[idx]), Tensor(a_train[idx]))
            backward(loss)
            adam_step(policy.parameters(), lr=cfg.policy_lr,
                      beta1=cfg.beta1, beta2=cfg.beta2)
            train_nll += float(loss.data) / n_batches
        with nm.no_grad():
            val_nll = float(policy.nll(Tensor(z_val), Tensor(a_val)).data)
        history.append({"epoch": epoch, "train_nll": train_nll, "val_nll": val_nll})
        if log:
            log(f"policy epoch {epoch}: train nll {train_nll:.4f} val nll {val_nll:.4f}")
    if policy_path is not None:
        rep_hash = hashlib.sha256(model.blob().astype("<f8").tobytes()).hexdigest()
        policy.save(policy_path, rep_hash=rep_hash)
    return policy, history


# -- rollout evaluation --------------------------------------------------------

@dataclass
class EvalResult:
    condition: str
    corrupt_modality: str | None
    success_rate: float
    successes: list
    episode_logs: list = field(default_factory=list)


def rollout_eval(model: FusionModel, policy: Policy, table: ThresholdTable | None,
                 condition: str, corrupt_modality: str | None, cfg: Config,
                 n_episodes: int | None = None, seed: int | None = None,
                 log=None) -> EvalResult:
    """Run policy episodes under one evaluation condition.

    normal: clean inputs, full fusion. compensated: per-step corruption of
    one modality, detect_correct pipeline. not_compensated: same corruption,
    full fusion. Episode seeds are shared across conditions.
    """
    if condition not in CONDITIONS:
        raise ContractError(f"unknown evaluation condition '{condition}'")
    if condition != "normal":
        if corrupt_modality not in ("rgb", "depth", "force"):
            raise ContractError("corrupt_modality is required unless condition=normal")
    else:
        corrupt_modality = None
    if condition == "compensated" and table is None:
        raise ContractError("compensated evaluation requires a calibrated threshold table")
    stats = model.norm_stats
    if stats is None:
        raise ContractError("model checkpoint carries no normalization stats")
    n_episodes = cfg.episodes if n_episodes is None else n_episodes
    seed = cfg.eval_seed if seed is None else seed
    mode = "detect_correct" if condition == "compensated" else "full"
    env = PlanarInsertionEnv(Config(**model.cfg.to_dict()))
    zeros = np.zeros(3)

    successes = []
    episode_logs = []
    for ep in range(n_episodes):
        state = env.reset(seed * 1_000_019 + ep)
        steps = []
        success = False
        for t in range(cfg.horizon):
            obs = env.observe(state, zeros, stats)
            spec = None
            if corrupt_modality is not None:
                rng = np.random.default_rng(
                    np.random.SeedSequence([0xE7A7, seed, ep, t]))
                spec = sample_spec(corrupt_modality, rng, stats=stats, cfg=cfg)
                obs = apply(spec, obs)
            code, det = compensate(obs, model, table, mode)
            action = policy.act(code)
            state, _, _ = env.step(state, action)
            steps.append({
                "t": t,
                "corruption": spec.to_json() if spec is not None else None,
                "detection": det.to_json() if det is not None else None,
                "action": action.tolist(),
            })
            if env.is_success(state):
                success = True
                break
        successes.append(success)
        episode_logs.append({"episode": ep, "success": success,
                             "n_steps": len(steps), "steps": steps})
        if log:
            log(f"{condition}/{corrupt_modality or '-'} episode {ep}: "
                f"{'success' if success else 'fail'} in {len(steps)} steps")
    return EvalResult(condition=condition, corrupt_modality=corrupt_modality,
                      success_rate=float(np.mean(successes)),
                      successes=successes, episode_logs=episode_logs)
