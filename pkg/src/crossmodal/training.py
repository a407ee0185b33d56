"""Representation training: full loss stack and the optimization loop.

Every step runs a full-modality pass (reconstructions, masked
reconstructions, KL to the unit prior, self-supervised heads) and, with
probability drop_rate, a second pass in which one of {rgb, depth, force} is
removed before fusion. The dropped pass recomputes all decoder and head
losses from the reduced latent and adds the squared L2 distance between the
two posterior means, which is what teaches the model to compensate for a
missing modality. Pairing negatives are injected by swapping the RGB of a
random half of the batch with a far-away frame.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import numerics as nm
from .config import Config
from .env import RES, WINDOW, WRENCH_DIM, DatasetBundle, Split, unpaired_indices
from .errors import ContractError, NumericError
from .model import DROPPABLE, FORCE_RECON_DIMS, FusionModel, LatentCode, fuse_poe, reparameterize
from .numerics import Tensor, adam_step, backward

TERMS = ("recon_rgb", "recon_depth", "recon_force", "recon_proprio",
         "recon_mask_rgb", "recon_mask_depth", "kl",
         "flow", "flow_mask", "ee_pos", "next_contact", "pairing", "latent_dist")

SS_TERMS = ("flow", "flow_mask", "ee_pos", "next_contact", "pairing")


def effective_weights(cfg: Config) -> dict:
    """Per-term weights with ablation flags applied."""
    w = {
        "flow": cfg.w_flow, "flow_mask": cfg.w_flow_mask, "ee_pos": cfg.w_ee_pos,
        "next_contact": cfg.w_next_contact, "pairing": cfg.w_pairing,
        "kl": cfg.w_kl, "recon": cfg.w_recon, "recon_mask": cfg.w_recon_mask,
        "latent_dist": cfg.w_latent_dist,
    }
    if cfg.no_latent_dist:
        w["latent_dist"] = 0.0
    if cfg.recon_only:
        for k in SS_TERMS:
            w[k] = 0.0
    if cfg.ss_only:
        w["recon"] = 0.0
        w["recon_mask"] = 0.0
    if any(v < 0 for v in w.values()):
        raise ContractError("loss weights must be non-negative")
    return w


def term_weight(name: str, w: dict) -> float:
    if name.startswith("recon_mask"):
        return w["recon_mask"]
    if name.startswith("recon"):
        return w["recon"]
    return w[name]


# -- individual losses --------------------------------------------------
# The dense raster losses are single fused graph nodes (forward in plain
# numpy, one hand-written backward pass); they dominate the step cost.

def mse_l1(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error plus 0.2 times mean absolute error."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    diff = pred.data - target.data
    n = diff.size
    value = float(np.mean(diff * diff) + 0.2 * np.mean(np.abs(diff)))

    def backward(g):
        gd = (g / n) * (2.0 * diff + 0.2 * np.sign(diff))
        if pred.requires_grad:
            pred.accumulate_grad(gd, owned=not target.requires_grad)
        if target.requires_grad:
            np.negative(gd, out=gd)
            target.accumulate_grad(gd, owned=True)

    return nm.make_node("mse_l1", value, (pred, target), backward)


def masked_mse(pred: Tensor, target: Tensor, mask_vec: np.ndarray) -> Tensor:
    """MSE restricted to robot-mask entries (mask_vec is 0/1 per column)."""
    count = float(mask_vec.sum())
    if count == 0:
        return Tensor(0.0)
    target = target if isinstance(target, Tensor) else Tensor(target)
    diff = (pred.data - target.data) * mask_vec
    scale = 1.0 / (pred.shape[0] * count)
    value = float(np.sum(diff * diff) * scale)

    def backward(g):
        gd = (2.0 * g * scale) * diff
        if pred.requires_grad:
            pred.accumulate_grad(gd, owned=not target.requires_grad)
        if target.requires_grad:
            np.negative(gd, out=gd)
            target.accumulate_grad(gd, owned=True)

    return nm.make_node("masked_mse", value, (pred, target), backward)


def kl_to_prior(code: LatentCode) -> Tensor:
    """Closed-form KL(N(mu, var) || N(0, I)), summed over dims, batch mean."""
    per_dim = code.mean.square() + code.variance - 1.0 - code.variance.log()
    return 0.5 * per_dim.sum(axis=1).mean()


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Binary cross entropy on logits, mean over all entries."""
    labels = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    x = logits.data
    n = x.size
    softplus = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    value = float(np.mean(softplus - labels * x))

    def backward(g):
        sig = np.empty_like(x)
        pos = x >= 0
        sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        sig[~pos] = ex / (1.0 + ex)
        sig -= labels
        sig *= g / n
        if logits.requires_grad:
            logits.accumulate_grad(sig, owned=True)

    return nm.make_node("bce_with_logits", value, (logits,), backward)


def endpoint_error(pred_flow: Tensor, label_flow: np.ndarray,
                   mask: np.ndarray) -> Tensor:
    """Mean end-point error over masked pixels; empty masks contribute 0."""
    n_pix = RES * RES
    batch = pred_flow.shape[0]
    du = pred_flow.data[:, :n_pix] - label_flow[:, :n_pix]
    dv = pred_flow.data[:, n_pix:] - label_flow[:, n_pix:]
    epe = np.sqrt(du * du + dv * dv + 1e-12)
    weights = mask / np.maximum(mask.sum(axis=1, keepdims=True), 1.0) / batch
    value = float(np.sum(epe * weights))

    def backward(g):
        scale = g * weights / epe
        gd = np.empty((batch, 2 * n_pix))
        np.multiply(scale, du, out=gd[:, :n_pix])
        np.multiply(scale, dv, out=gd[:, n_pix:])
        if pred_flow.requires_grad:
            pred_flow.accumulate_grad(gd, owned=True)

    return nm.make_node("endpoint_error", value, (pred_flow,), backward)


def latent_distance_loss(code_full: LatentCode, code_drop: LatentCode,
                         detach_full: bool = False) -> Tensor:
    """Squared L2 distance between posterior means, batch mean."""
    full_mean = code_full.mean.detach() if detach_full else code_full.mean
    return (full_mean - code_drop.mean).square().sum(axis=1).mean()


# -- grouped losses ----------------------------------------------------------

def elbo_losses(model: FusionModel, code: LatentCode, z: Tensor, batch: dict,
                rgb_mask_vec: np.ndarray, depth_mask_vec: np.ndarray,
                force3_target: np.ndarray, include_kl: bool = True) -> dict:
    """Reconstruction terms from latent z plus (optionally) the KL term."""
    out = {}
    rgb_full, rgb_masked = model.decode("rgb", z)
    depth_full, depth_masked = model.decode("depth", z)
    force_rec = model.decode("force", z)
    proprio_rec = model.decode("proprio", z)
    out["recon_rgb"] = mse_l1(rgb_full, batch["rgb"])
    out["recon_depth"] = mse_l1(depth_full, batch["depth"])
    out["recon_force"] = mse_l1(force_rec, Tensor(force3_target))
    out["recon_proprio"] = mse_l1(proprio_rec, batch["proprio"])
    out["recon_mask_rgb"] = masked_mse(rgb_masked, batch["rgb"], rgb_mask_vec)
    out["recon_mask_depth"] = masked_mse(depth_masked, batch["depth"], depth_mask_vec)
    if include_kl:
        out["kl"] = kl_to_prior(code)
    return out


def self_supervised_losses(head_out: dict, labels: dict,
                           pairing_logits: Tensor | None = None,
                           pairing_labels: np.ndarray | None = None) -> dict:
    """Flow EPE, mask/contact BCE, end-effector MSE and (optional) pairing BCE."""
    out = {
        "flow": endpoint_error(head_out["flow"], labels["flow"], labels["flow_mask"]),
        "flow_mask": bce_with_logits(head_out["flow_mask_logits"],
                                     Tensor(labels["flow_mask"])),
        "ee_pos": (head_out["ee_pos"] - Tensor(labels["ee_pos"])).square().mean(),
        "next_contact": bce_with_logits(head_out["contact_logit"],
                                        Tensor(labels["next_contact"])),
    }
    if pairing_logits is not None:
        out["pairing"] = bce_with_logits(pairing_logits, Tensor(pairing_labels))
    return out


# -- one optimization step ---------------------------------------------------

def _merge(report: dict, terms: dict) -> None:
    for k, t in terms.items():
        report[k] = report.get(k, 0.0) + float(t.data)


def compute_step_losses(model: FusionModel, batch: dict, labels: dict,
                        extras: dict, cfg: Config, weights: dict):
    """Shared by training and validation; returns (total Tensor, report).

    When a modality is dropped, the full-pass and dropped-pass latents are
    stacked so every decoder and head runs once over the doubled batch; each
    reconstruction/head term is then the average of the two passes.
    """
    report = {k: 0.0 for k in TERMS}
    tensors = {}

    def add(terms: dict) -> None:
        for k, t in terms.items():
            if term_weight(k, weights) == 0.0:
                continue
            tensors[k] = tensors[k] + t if k in tensors else t
            report[k] += float(t.data)

    experts = model.encode_all(batch)
    code_full = reparameterize(fuse_poe(list(experts.values())), extras["seed"])
    z1 = code_full.sample

    drop = extras.get("drop")
    code_drop = None
    if drop is not None:
        sub = [e for m, e in experts.items() if m != drop]
        code_drop = reparameterize(fuse_poe(sub), extras["seed"] + 2)
        z = nm.concat([z1, code_drop.sample], axis=0)

        def tile(arr):
            return np.concatenate([arr, arr], axis=0)
    else:
        z = z1

        def tile(arr):
            return arr

    if weights["recon"] > 0 or weights["recon_mask"] > 0:
        targets = {m: Tensor(tile(batch[m].data))
                   for m in ("rgb", "depth", "force", "proprio")}
        add(elbo_losses(model, code_full, z, targets, extras["rgb_mask_vec"],
                        extras["depth_mask_vec"], tile(extras["force3"]),
                        include_kl=False))
    if weights["kl"] > 0:
        add({"kl": kl_to_prior(code_full)})

    if any(weights[k] > 0 for k in SS_TERMS):
        head_out = model.predict_heads(z, Tensor(tile(batch["action"].data)))
        labels2 = {k: tile(v) for k, v in labels.items()}
        add(self_supervised_losses(head_out, labels2))
        if weights["pairing"] > 0:
            # pairing runs on the full-modality pass only: with a modality
            # deliberately removed the question is ill-posed
            pos_logits = model.pairing_logit(z1)
            if extras.get("neg_rgb") is not None and len(extras["neg_sel"]) > 0:
                sel = extras["neg_sel"]
                neg_experts = [model.encode("rgb", Tensor(extras["neg_rgb"]))]
                for m in ("depth", "force", "proprio"):
                    e = experts[m]
                    neg_experts.append(type(e)(mean=e.mean[sel],
                                               variance=e.variance[sel], modality=m))
                code_neg = reparameterize(fuse_poe(neg_experts), extras["seed"] + 1)
                neg_logits = model.pairing_logit(code_neg.sample)
                pair_logits = nm.concat([pos_logits, neg_logits], axis=0)
                pair_labels = np.concatenate(
                    [np.ones((pos_logits.shape[0], 1)),
                     np.zeros((neg_logits.shape[0], 1))])
            else:
                pair_logits = pos_logits
                pair_labels = np.ones((pos_logits.shape[0], 1))
            add({"pairing": bce_with_logits(pair_logits, Tensor(pair_labels))})

    if drop is not None and weights["latent_dist"] > 0:
        add({"latent_dist": latent_distance_loss(
            code_full, code_drop, cfg.detach_full_latent)})

    total = None
    for k, t in tensors.items():
        wt = term_weight(k, weights) * t
        total = wt if total is None else total + wt
    if total is None:
        total = Tensor(0.0)
    report["total"] = float(total.data)
    if not np.isfinite(report["total"]):
        raise NumericError(f"non-finite training loss; per-term values: {report}")
    return total, report


def training_step(model: FusionModel, batch: dict, labels: dict, extras: dict,
                  cfg: Config, weights: dict) -> dict:
    """One weighted-loss Adam update; returns the per-term loss report."""
    total, report = compute_step_losses(model, batch, labels, extras, cfg, weights)
    if total.requires_grad:
        backward(total)
    adam_step(model.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    return report


# -- the loop -----------------------------------------------------------------

def contact_balance_weights(split: Split) -> np.ndarray:
    """Sampling weights proportional to 1/frequency of the contact class."""
    contact = split.labels["next_contact"][:, 0] > 0.5
    n_c, n_f = int(contact.sum()), int((~contact).sum())
    if n_c == 0 or n_f == 0:
        return np.full(split.n_frames, 1.0 / split.n_frames)
    w = np.where(contact, 0.5 / n_c, 0.5 / n_f)
    return w / w.sum()


def _batch_arrays(split: Split, idx: np.ndarray, zero_force: bool):
    batch = {m: Tensor(split.obs[m][idx]) for m in ("rgb", "depth", "force", "proprio")}
    batch["action"] = Tensor(split.obs["action"][idx])
    labels = {
        "flow": split.labels["flow"][idx],
        "flow_mask": split.labels["flow_mask"][idx],
        "ee_pos": split.labels["ee_pos"][idx],
        "next_contact": split.labels["next_contact"][idx],
    }
    force3 = split.obs["force"][idx].reshape(-1, WINDOW, WRENCH_DIM)[:, :, :FORCE_RECON_DIMS]
    if zero_force:
        force3 = np.zeros_like(force3)
    return batch, labels, force3.reshape(len(idx), WINDOW * FORCE_RECON_DIMS)


class Trainer:
    def __init__(self, bundle: DatasetBundle, cfg: Config):
        if bundle.splits["train"].n_frames == 0:
            raise ContractError("training split is empty")
        self.bundle = bundle
        self.cfg = cfg
        self.weights = effective_weights(cfg)
        self.model = FusionModel(cfg, norm_stats=bundle.stats,
                                 robot_mask=bundle.robot_mask)
        mask = bundle.robot_mask.astype(np.float64)
        self.rgb_mask_vec = np.tile(mask, 3)
        self.depth_mask_vec = mask
        self.positions = bundle.stats.denormalize_position(
            bundle.splits["train"].obs["proprio"])

    def _extras(self, split: Split, idx, drop, seed, neg_rng=None):
        batch, labels, force3 = _batch_arrays(split, idx, self.cfg.zero_force)
        extras = {
            "rgb_mask_vec": self.rgb_mask_vec,
            "depth_mask_vec": self.depth_mask_vec,
            "force3": force3,
            "drop": drop,
            "seed": seed,
            "neg_rgb": None,
            "neg_sel": np.array([], dtype=np.int64),
        }
        if neg_rng is not None and self.cfg.unpaired_rate > 0 and self.weights["pairing"] > 0:
            n_neg = int(round(len(idx) * self.cfg.unpaired_rate))
            if n_neg > 0:
                sel = np.sort(neg_rng.choice(len(idx), size=n_neg, replace=False))
                repl = unpaired_indices(self.positions, idx[sel], neg_rng)
                extras["neg_sel"] = sel
                extras["neg_rgb"] = split.obs["rgb"][repl]
        return batch, labels, extras

    def run(self, ckpt_path: str | Path | None = None,
            csv_path: str | Path | None = None, log=None) -> FusionModel:
        cfg = self.cfg
        train = self.bundle.splits["train"]
        val = self.bundle.splits["val"]
        p = contact_balance_weights(train)
        rows = []
        step = 0
        for epoch in range(cfg.epochs):
            rng = np.random.default_rng(
                np.random.SeedSequence([0x7E41, cfg.train_seed, epoch]))
            order = rng.choice(train.n_frames, size=train.n_frames, p=p)
            n_batches = max(1, train.n_frames // cfg.batch)
            epoch_report: dict = {}
            for b in range(n_batches):
                idx = order[b * cfg.batch:(b + 1) * cfg.batch]
                drop = None
                if rng.random() < cfg.drop_rate:
                    drop = DROPPABLE[int(rng.integers(len(DROPPABLE)))]
                batch, labels, extras = self._extras(
                    train, idx, drop, seed=cfg.train_seed * 1_000 + step, neg_rng=rng)
                report = training_step(self.model, batch, labels, extras, cfg,
                                       self.weights)
                for k, v in report.items():
                    epoch_report[k] = epoch_report.get(k, 0.0) + v / n_batches
                step += 1
            rows.append({"epoch": epoch, "split": "train", **epoch_report})
            rows.append({"epoch": epoch, "split": "val",
                         **self.evaluate(val, epoch)})
            if log:
                log(f"epoch {epoch}: train total {epoch_report['total']:.4f}")
        if ckpt_path is not None:
            self.model.save(ckpt_path, train_config_hash=cfg.config_hash())
        if csv_path is not None:
            write_loss_csv(csv_path, rows, cfg)
        self.history = rows
        return self.model

    def evaluate(self, split: Split, epoch: int) -> dict:
        """Per-epoch validation losses on a fixed seeded subsample."""
        cfg = self.cfg
        rng = np.random.default_rng(
            np.random.SeedSequence([0xE7A1, cfg.train_seed, epoch]))
        sub_rng = np.random.default_rng(
            np.random.SeedSequence([0xF1E1, cfg.train_seed]))
        n_eval = min(split.n_frames, cfg.val_eval_frames)
        frames = np.sort(sub_rng.choice(split.n_frames, size=n_eval, replace=False))
        n_batches = max(1, n_eval // cfg.batch)
        agg: dict = {}
        for b in range(n_batches):
            idx = frames[b * cfg.batch:min((b + 1) * cfg.batch, n_eval)]
            drop = DROPPABLE[int(rng.integers(len(DROPPABLE)))]
            batch, labels, extras = self._extras(split, idx, drop,
                                                 seed=0xE0 + epoch * 131 + b)
            _, report = compute_step_losses(self.model, batch, labels, extras,
                                            cfg, self.weights)
            for k, v in report.items():
                agg[k] = agg.get(k, 0.0) + v / n_batches
        return agg


def write_loss_csv(path: str | Path, rows: list, cfg: Config) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["epoch", "split", *TERMS, "total"]
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={cfg.config_hash()} seed={cfg.train_seed}\n")
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: repr(row[c]) if isinstance(row[c], float) else row[c]
                             for c in cols})


def train(bundle: DatasetBundle, cfg: Config, ckpt_path=None, csv_path=None,
          log=None) -> FusionModel:
    """Train the representation; deterministic given config and seed."""
    return Trainer(bundle, cfg).run(ckpt_path, csv_path, log=log)
