"""Command-line surface.

Every command takes a JSON config (strictly parsed; unknown keys fail before
any compute), writes its outputs under ``output_dir/<command>-<timestamp>/``
next to a resolved-config snapshot, and is reproducible from that snapshot
modulo wall-clock fields. Exit codes: 0 success, 1 invalid config, 2 runtime
failure, 3 theory-check failure. The ``PURIKIT_SEED`` env var overrides the
config seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from datetime import datetime
from pathlib import Path

import torch

from . import __version__
from .attacks import evaluate_attack
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import LabeledDataset, load_dataset, make_toy_dataset, save_raw_bin
from .ddpm import GaussianState, kl_trajectory
from .finetune import build_triples, finetune
from .models import ClassifierNet, DenoiserNet, build_classifier, build_denoiser, train_classifier
from .pipeline import ablate, degrade, evaluate_defense, purify_batch, write_records_csv
from .resshift import SRPair, rs_train_base
from .rng import RngState
from .images import resize

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_CHECK_FAILED = 3


def _outdir(cfg: RunConfig, command: str) -> Path:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    out = cfg.output_dir / f"{command}-{stamp}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    return out


def _load_split(cfg: RunConfig, split: str) -> LabeledDataset:
    d = cfg.raw["dataset"]
    return load_dataset(d[split], d["format"], num_classes=d["num_classes"])


def _require_checkpoint(cfg: RunConfig, key: str, producer: str) -> Path:
    path = cfg.raw["checkpoints"][key]
    if not path or not Path(path).exists():
        raise FileNotFoundError(
            f"checkpoint '{key}' not found at {path!r}; produce it with `purikit {producer}`"
        )
    return Path(path)


def _load_classifier(cfg: RunConfig) -> ClassifierNet:
    path = _require_checkpoint(cfg, "classifier", "train-classifier")
    net = build_classifier(cfg.raw["dataset"]["num_classes"], RngState(0))
    return load_checkpoint(path, net)


def _load_sr(cfg: RunConfig, key: str = "sr") -> DenoiserNet:
    producer = "train-sr" if key == "sr" else "finetune"
    path = _require_checkpoint(cfg, key, producer)
    net = build_denoiser(16, RngState(0))
    return load_checkpoint(path, net)


# -- commands -----------------------------------------------------------------

def cmd_prep(cfg: RunConfig) -> int:
    out = _outdir(cfg, "prep")
    d = cfg.raw["dataset"]
    rng = RngState(cfg.seed)
    for split, count in (("train", d["train_count"]), ("test", d["test_count"])):
        ds = make_toy_dataset(count, rng.child(split), size=d["image_size"],
                              num_classes=d["num_classes"])
        path = Path(d[split])
        path.parent.mkdir(parents=True, exist_ok=True)
        save_raw_bin(path, ds)
        print(f"wrote {split}: {path} ({count} images)")
    (out / "summary.json").write_text(json.dumps({"train": d["train"], "test": d["test"]}))
    return EXIT_OK


def cmd_train_classifier(cfg: RunConfig) -> int:
    out = _outdir(cfg, "train-classifier")
    ds = _load_split(cfg, "train")
    net, metrics = train_classifier(ds, cfg.classifier_train(), RngState(cfg.seed).child("classifier"))
    ckpt = out / "classifier.prkw"
    save_checkpoint(ckpt, net, meta={"metrics": metrics, "num_classes": ds.num_classes})
    print(f"classifier: train_acc={metrics['train_acc']:.2f} val_acc={metrics['val_acc']:.2f}")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_train_sr(cfg: RunConfig) -> int:
    out = _outdir(cfg, "train-sr")
    ds = _load_split(cfg, "train")
    rng = RngState(cfg.seed).child("sr")
    sched = cfg.rs_schedule()
    pair = degrade(ds.images, cfg.kernel(), cfg.raw["sr_train"]["degrade_noise_sigma"],
                   rng.child("degrade"))
    size = tuple(cfg.raw["purify"]["sr_input_size"])
    pair = SRPair(hr=resize(pair.hr, *size), lr=resize(pair.lr, *size))
    net = build_denoiser(16, rng.child("init"))
    net, history = rs_train_base(pair, net, sched, cfg.sr_train(), rng.child("train"))
    ckpt = out / "sr.prkw"
    save_checkpoint(ckpt, net, meta={"schedule": sched.config(), "base": 16})
    with open(out / "loss.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "loss"])
        writer.writerows(history)
    print(f"final loss: {history[-1][1]:.5f}")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_finetune(cfg: RunConfig) -> int:
    out = _outdir(cfg, "finetune")
    ds = _load_split(cfg, "train")
    subset = cfg.raw["finetune"]["subset"]
    rng = RngState(cfg.seed).child("finetune")
    if subset and subset < len(ds):
        ds = ds.subset(rng.child("subset").permutation(len(ds))[:subset])
    classifier = _load_classifier(cfg)
    net = _load_sr(cfg)
    fcfg = cfg.finetune()
    triples = build_triples(ds, classifier, cfg.kernel(), fcfg, rng.child("triples"))
    net, history = finetune(net, triples, classifier, cfg.rs_schedule(), fcfg,
                            rng.child("train"))
    ckpt = out / "sr_finetuned.prkw"
    save_checkpoint(ckpt, net, meta={"schedule": cfg.rs_schedule().config(), "base": 16})
    with open(out / "loss.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["iteration", "recon", "contrastive", "total"])
        writer.writeheader()
        writer.writerows(history)
    print(f"final total loss: {history[-1]['total']:.5f}")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_attack(cfg: RunConfig) -> int:
    out = _outdir(cfg, "attack")
    ds = _load_split(cfg, "test")
    n = min(cfg.raw["eval"]["n"], len(ds))
    ds = ds.subset(range(n))
    classifier = _load_classifier(cfg)
    batch, report = evaluate_attack(classifier, ds, cfg.attack(),
                                    rng=RngState(cfg.seed).child("attack"))
    adv_ds = LabeledDataset(batch.adversarial, batch.labels, ds.num_classes)
    save_raw_bin(out / "adversarial.bin", adv_ds)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_purify(cfg: RunConfig) -> int:
    out = _outdir(cfg, "purify")
    ds = _load_split(cfg, "test")
    n = min(cfg.raw["eval"]["n"], len(ds))
    ds = ds.subset(range(n))
    net = _load_sr(cfg, "sr_finetuned" if cfg.raw["checkpoints"]["sr_finetuned"] else "sr")
    purified = purify_batch(ds.images, net, cfg.purify(), RngState(cfg.seed).child("purify"))
    save_raw_bin(out / "purified.bin", LabeledDataset(purified, ds.labels, ds.num_classes))
    print(f"purified {n} images -> {out / 'purified.bin'}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    out = _outdir(cfg, "evaluate")
    ds = _load_split(cfg, "test")
    n = min(cfg.raw["eval"]["n"], len(ds))
    ds = ds.subset(range(n))
    classifier = _load_classifier(cfg)
    net = _load_sr(cfg, "sr_finetuned" if cfg.raw["checkpoints"]["sr_finetuned"] else "sr")
    report, records = evaluate_defense(classifier, net, ds, cfg.attack(), cfg.purify(),
                                       RngState(cfg.seed).child("evaluate"))
    (out / "report.json").write_text(report.to_json())
    write_records_csv(out / "records.csv", records)
    print(report.to_json())
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    out = _outdir(cfg, "ablate")
    ds = _load_split(cfg, "test")
    n = min(cfg.raw["eval"]["ablate_n"], len(ds))
    ds = ds.subset(range(n))
    classifier = _load_classifier(cfg)
    net = _load_sr(cfg, "sr_finetuned" if cfg.raw["checkpoints"]["sr_finetuned"] else "sr")
    rows = ablate(classifier, net, ds, cfg.attack(), cfg.purify(),
                  RngState(cfg.seed).child("ablate"))
    with open(out / "ablation.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    for r in rows:
        print(r)
    return EXIT_OK


def cmd_theory_check(cfg: RunConfig) -> int:
    """KL-trajectory check: 100 random Gaussian pairs must show non-increasing
    KL along the forward chain, with the terminal value strictly below every
    intermediate one."""
    out = _outdir(cfg, "theory-check")
    sched = cfg.vp_schedule()
    rng = RngState(cfg.seed).child("theory")
    n_pairs, dim = 100, 4
    rows, failures = [], 0
    for i in range(n_pairs):
        p = GaussianState(rng.randn(dim, dtype=torch.float64), float(rng.uniform(1, low=0.2, high=2.0)))
        q = GaussianState(rng.randn(dim, dtype=torch.float64), float(rng.uniform(1, low=0.2, high=2.0)))
        traj = kl_trajectory(p, q, sched)
        monotone = bool((traj[1:] <= traj[:-1] + 1e-12).all())
        terminal_min = bool((traj[-1] < traj[:-1]).all())
        failures += 0 if (monotone and terminal_min) else 1
        rows.append([i, monotone, terminal_min, *[float(v) for v in traj]])
    with open(out / "kl_trajectories.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["pair", "monotone", "terminal_min", *[f"t{t}" for t in range(1, sched.T + 1)]])
        writer.writerows(rows)
    status = "pass" if failures == 0 else f"fail ({failures}/{n_pairs} pairs)"
    print(f"theory check: {status}, {n_pairs - failures}/{n_pairs} monotone trajectories")
    return EXIT_OK if failures == 0 else EXIT_CHECK_FAILED


def cmd_bench(cfg: RunConfig) -> int:
    out = _outdir(cfg, "bench")
    ds = _load_split(cfg, "test")
    classifier = _load_classifier(cfg)
    net = _load_sr(cfg, "sr_finetuned" if cfg.raw["checkpoints"]["sr_finetuned"] else "sr")
    reps = cfg.raw["eval"]["bench_reps"]
    rng = RngState(cfg.seed).child("bench")
    from .pipeline import purify
    result = {}
    for steps in (4, 15, 50):
        pcfg = cfg.purify(steps=steps)
        times = {"aa_time": 0.0, "sr_time": 0.0, "resize_time": 0.0}
        purify(ds.images[0], net, pcfg, rng.child(("warmup", steps)))  # warmup excluded
        for r in range(reps):
            t = {}
            purify(ds.images[r % len(ds)], net, pcfg, rng.child(("bench", steps, r)), times=t)
            for k in times:
                times[k] += t[k]
        result[f"steps_{steps}"] = {k.replace("_time", ""): v / reps for k, v in times.items()}
    (out / "timing.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


_COMMANDS = {
    "prep": cmd_prep,
    "train-classifier": cmd_train_classifier,
    "train-sr": cmd_train_sr,
    "finetune": cmd_finetune,
    "attack": cmd_attack,
    "purify": cmd_purify,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "theory-check": cmd_theory_check,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="purikit",
        description="Gradient-free adversarial purification: anti-aliasing + "
                    "residual-shifting super-resolution, with attack harness, "
                    "fine-tuning, ablations, and theory checks.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None,
                       help="JSON config file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.raw["seed"] = args.seed
    except (ConfigError, json.JSONDecodeError) as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return _COMMANDS[args.command](cfg)
    except (ConfigError,) as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
