"""Command-line driver: dataset generation, representation training,
threshold calibration, policy cloning, evaluation, and the oracle selftest.

Every output file embeds the config hash and seed that produced it, and each
stage is deterministic given those, so reruns are byte-comparable. Exit
codes: 0 success, 2 contract error, 3 numeric error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import selftest
from .config import Config, load_config
from .detector import ThresholdTable, calibrate
from .env import generate_dataset, load_dataset, save_dataset
from .errors import ContractError, NumericError
from .model import DROPPABLE, FusionModel, fuse_poe
from .policy import Policy, bc_train, latent_means, rollout_eval
from .training import train
from . import numerics as nm
from .numerics import Tensor


def _load_cfg(args) -> Config:
    overrides = {}
    for key in ("episodes", "eval_seed"):
        if getattr(args, key.replace("-", "_"), None) is not None:
            overrides[key] = getattr(args, key.replace("-", "_"))
    for flag, key in (("no_dist", "no_latent_dist"), ("recon_only", "recon_only"),
                      ("ss_only", "ss_only"), ("zero_force", "zero_force")):
        if getattr(args, flag, False):
            overrides[key] = True
    return load_config(getattr(args, "config", None), overrides)


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    bundle = generate_dataset(cfg)
    save_dataset(bundle, args.out)
    frames = {name: s.n_frames for name, s in bundle.splits.items()}
    print(f"dataset written to {args.out} (frames per split: {frames}, "
          f"config {cfg.config_hash()})")
    return 0


def cmd_train_rep(args) -> int:
    cfg = _load_cfg(args)
    bundle = load_dataset(args.data)
    out = Path(args.out)
    csv_path = out.parent / (out.stem + "_losses.csv")
    log = print if args.verbose else None
    train(bundle, cfg, ckpt_path=out, csv_path=csv_path, log=log)
    print(f"checkpoint written to {out} (losses: {csv_path}, "
          f"config {cfg.config_hash()})")
    return 0


def cmd_calibrate(args) -> int:
    cfg = _load_cfg(args)
    model = FusionModel.load(args.ckpt)
    bundle = load_dataset(args.data)
    log = print if args.verbose else None
    table, rows = calibrate(model, bundle.splits["train"], bundle.splits["val"],
                            cfg, log=log)
    table.save(args.out)
    csv_path = Path(args.out).parent / (Path(args.out).stem + "_auroc_by_kind.csv")
    with open(csv_path, "w", newline="") as fh:
        fh.write(f"# config_hash={cfg.config_hash()} seed={cfg.cal_seed}\n")
        writer = csv.writer(fh)
        writer.writerow(["modality", "kind", "auroc", "auroc_dims"])
        for row in rows:
            writer.writerow([row["modality"], row["kind"], repr(row["auroc"]),
                             " ".join(repr(x) for x in row["auroc_dims"])])
    print(f"thresholds written to {args.out} "
          f"(aurocs: rgb {table.aurocs['rgb']:.3f} depth {table.aurocs['depth']:.3f} "
          f"force_avg {table.aurocs['force_avg']:.3f}; per-kind CSV: {csv_path})")
    return 0


def cmd_train_policy(args) -> int:
    cfg = _load_cfg(args)
    model = FusionModel.load(args.ckpt)
    bundle = load_dataset(args.data)
    log = print if args.verbose else None
    _, history = bc_train(bundle, model, cfg, policy_path=args.out, log=log)
    first, last = history[0], history[-1]
    print(f"policy written to {args.out} (val nll {first['val_nll']:.4f} -> "
          f"{last['val_nll']:.4f}, config {cfg.config_hash()})")
    return 0


def latent_distance_report(model: FusionModel, bundle, batch: int = 256) -> dict:
    """Mean L2 distance between full and drop-one posterior means (test set)."""
    split = bundle.splits["test"]
    out = {}
    with nm.no_grad():
        dists = {m: [] for m in DROPPABLE}
        for lo in range(0, split.n_frames, batch):
            sl = slice(lo, min(lo + batch, split.n_frames))
            tensors = {m: Tensor(split.obs[m][sl])
                       for m in ("rgb", "depth", "force", "proprio")}
            experts = model.encode_all(tensors)
            full = fuse_poe(list(experts.values())).mean.data
            for m in DROPPABLE:
                sub = [e for name, e in experts.items() if name != m]
                dists[m].append(np.linalg.norm(
                    full - fuse_poe(sub).mean.data, axis=1))
    for m in DROPPABLE:
        out[m] = float(np.concatenate(dists[m]).mean())
    return out


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    model = FusionModel.load(args.ckpt)
    policy = Policy.load(args.policy)
    table = ThresholdTable.load(args.thresholds)
    bundle = load_dataset(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = print if args.verbose else None

    runs = [("normal", None)]
    for m in DROPPABLE:
        runs.append(("compensated", m))
        runs.append(("not_compensated", m))

    rate_rows = []
    for condition, modality in runs:
        result = rollout_eval(model, policy, table, condition, modality, cfg,
                              n_episodes=cfg.episodes, seed=cfg.eval_seed, log=log)
        rate_rows.append((condition, modality or "-", result.success_rate))
        name = f"rollout_{condition}_{modality or 'none'}.jsonl"
        with open(out_dir / name, "w") as fh:
            fh.write(json.dumps({"config_hash": cfg.config_hash(),
                                 "seed": cfg.eval_seed, "condition": condition,
                                 "corrupt_modality": modality},
                                sort_keys=True) + "\n")
            for ep_log in result.episode_logs:
                fh.write(json.dumps(ep_log, sort_keys=True) + "\n")
        print(f"{condition:16s} {modality or '-':6s} success rate "
              f"{result.success_rate:.3f}")

    with open(out_dir / "success_rates.csv", "w", newline="") as fh:
        fh.write(f"# config_hash={cfg.config_hash()} seed={cfg.eval_seed}\n")
        writer = csv.writer(fh)
        writer.writerow(["condition", "modality", "rate"])
        for condition, modality, rate in rate_rows:
            writer.writerow([condition, modality, repr(rate)])

    distances = latent_distance_report(model, bundle)
    with open(out_dir / "latent_distance.csv", "w", newline="") as fh:
        fh.write(f"# config_hash={cfg.config_hash()} seed={cfg.eval_seed}\n")
        writer = csv.writer(fh)
        writer.writerow(["modality", "mean_l2"])
        for m in DROPPABLE:
            writer.writerow([m, repr(distances[m])])
    print(f"reports written to {out_dir}")
    return 0


def cmd_selftest(args) -> int:
    ok = selftest.run_all(print)
    return 0 if ok else 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossmodal",
        description="Multimodal insertion representation with corrupted-sensor "
                    "detection and crossmodal compensation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the expert dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-rep", help="train the fusion representation")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--no-dist", dest="no_dist", action="store_true",
                   help="ablation: drop the latent distance objective")
    p.add_argument("--recon-only", dest="recon_only", action="store_true",
                   help="ablation: reconstruction objectives only")
    p.add_argument("--ss-only", dest="ss_only", action="store_true",
                   help="ablation: self-supervised objectives only")
    p.add_argument("--zero-force", dest="zero_force", action="store_true",
                   help="ablation: zero out force inputs")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_train_rep)

    p = sub.add_parser("calibrate", help="calibrate detection thresholds")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("train-policy", help="behavior-clone the expert")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_train_policy)

    p = sub.add_parser("evaluate", help="run the three evaluation conditions")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--thresholds", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--seed", dest="eval_seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("selftest", help="run the built-in oracle suites")
    p.set_defaults(fn=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ContractError as exc:
        print(f"error: contract violation: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
