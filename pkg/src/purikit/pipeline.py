"""End-to-end purification, the evaluation harness, and timing benchmarks.

The canonical composition is anti-alias (with RGB quantization) -> upscale to
the SR working size -> residual-shifting reverse chain -> resize for the
classifier. Classification stays with the caller. A flag to swap the AA/SR
order exists for ablation only and is non-canonical.

Purification is deterministic given a seed. The harness purifies per example
with an index-derived child stream, so results are independent of batch
composition and order.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch

from .antialias import FilterKernel, anti_alias, defend_preprocess
from .attacks import AttackConfig, fgsm, pgd
from .data import LabeledDataset
from .images import require_image, resize, to_nchw
from .models import ClassifierNet, DenoiserNet
from .resshift import ResShiftSchedule, SRPair, rs_sample
from .rng import RngState

__all__ = [
    "PurifyConfig",
    "EvalReport",
    "degrade",
    "purify",
    "purify_batch",
    "evaluate_defense",
    "ablate",
    "write_records_csv",
]

RECORD_FIELDS = ["index", "label", "clean_pred", "adv_pred", "purified_adv_pred",
                 "aa_time", "sr_time", "resize_time"]


@dataclass
class PurifyConfig:
    kernel: FilterKernel
    sched: ResShiftSchedule
    sr_input_size: tuple = (64, 64)
    classifier_size: tuple = (32, 32)
    quantize_stage: bool = True
    aa_first: bool = True     # False = swapped order; ablation only
    repeats: int = 1

    def __post_init__(self):
        if min(*self.sr_input_size, *self.classifier_size) < 1:
            raise ValueError("sizes must be positive")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")


@dataclass
class EvalReport:
    standard_acc: float
    robust_acc: float
    n: int
    per_stage_time: dict
    attack_meta: dict
    seed: int

    def __post_init__(self):
        if not (0 <= self.standard_acc <= 100 and 0 <= self.robust_acc <= 100):
            raise ValueError("accuracies must be percentages in [0, 100]")

    def to_json(self) -> str:
        return json.dumps({
            "standard_acc": self.standard_acc,
            "robust_acc": self.robust_acc,
            "n": self.n,
            "per_stage_time": self.per_stage_time,
            "attack_meta": self.attack_meta,
            "seed": self.seed,
        }, indent=2, sort_keys=True)


def degrade(hr: torch.Tensor, kernel: FilterKernel, noise_sigma: float,
            rng: RngState) -> SRPair:
    """Training-side degradation: blur with the defense filter, add Gaussian
    noise, clamp. The pair stays at the input resolution; any pre-upscale for
    the network is the caller's job."""
    require_image(hr, "hr")
    lr = anti_alias(hr, kernel)
    if noise_sigma > 0:
        lr = (lr + noise_sigma * rng.randn_like(lr)).clamp(0.0, 1.0)
    return SRPair(hr=hr, lr=lr)


def _aa_stage(x: torch.Tensor, cfg: PurifyConfig) -> torch.Tensor:
    if cfg.quantize_stage:
        return defend_preprocess(x, cfg.kernel)
    return anti_alias(x, cfg.kernel)


def _sr_stage(x: torch.Tensor, net: DenoiserNet, cfg: PurifyConfig,
              rng: RngState) -> torch.Tensor:
    z = resize(x, *cfg.sr_input_size)
    return rs_sample(z, net, cfg.sched, rng)


def purify(x: torch.Tensor, net: DenoiserNet, cfg: PurifyConfig,
           rng: RngState, times: Optional[dict] = None) -> torch.Tensor:
    """Purify one image (or one jointly seeded batch); output is always at
    classifier_size. Pass a dict as ``times`` to collect per-stage seconds."""
    require_image(x)
    z = x
    for rep in range(cfg.repeats):
        rep_rng = rng.child(("repeat", rep)) if cfg.repeats > 1 else rng
        if cfg.aa_first:
            t0 = time.perf_counter()
            z = _aa_stage(z, cfg)
            t1 = time.perf_counter()
            z = _sr_stage(z, net, cfg, rep_rng)
            t2 = time.perf_counter()
        else:
            t0 = time.perf_counter()
            z = _sr_stage(z, net, cfg, rep_rng)
            t1 = time.perf_counter()
            z = _aa_stage(z, cfg)
            t2 = time.perf_counter()
        if times is not None:
            times["aa_time"] = times.get("aa_time", 0.0) + ((t1 - t0) if cfg.aa_first else (t2 - t1))
            times["sr_time"] = times.get("sr_time", 0.0) + ((t2 - t1) if cfg.aa_first else (t1 - t0))
    t3 = time.perf_counter()
    out = resize(z, *cfg.classifier_size)
    if times is not None:
        times["resize_time"] = times.get("resize_time", 0.0) + (time.perf_counter() - t3)
    return out


def purify_batch(images: torch.Tensor, net: DenoiserNet, cfg: PurifyConfig,
                 rng: RngState, ids: Optional[Sequence[int]] = None) -> torch.Tensor:
    """Per-image purification with index-derived child streams: each output
    depends only on (image, id, seed), never on batch composition."""
    if images.dim() == 3:
        return purify(images, net, cfg, rng.child(("purify", ids[0] if ids else 0)))
    ids = list(range(len(images))) if ids is None else list(ids)
    with torch.no_grad():
        out = [purify(images[j], net, cfg, rng.child(("purify", ids[j])))
               for j in range(len(images))]
    return torch.stack(out)


@torch.no_grad()
def _pred(classifier: ClassifierNet, img: torch.Tensor) -> int:
    return int(classifier(to_nchw(img)).argmax(dim=1))


def evaluate_defense(classifier: ClassifierNet, sr_net: DenoiserNet,
                     ds: LabeledDataset, attack_cfg: AttackConfig,
                     purify_cfg: PurifyConfig, rng: RngState,
                     adversarial: Optional[torch.Tensor] = None) -> tuple[EvalReport, list]:
    """Standard accuracy (purified clean), robust accuracy (purified
    adversarial), and per-stage wall-clock (monotonic, first example excluded
    as warmup). Returns the report and per-example records; report aggregates
    are recomputed from exactly those records.

    A precomputed adversarial set can be passed to reuse attack work.
    """
    classifier.eval()
    if adversarial is None:
        if attack_cfg.method == "fgsm":
            adversarial = fgsm(classifier, ds.images, ds.labels, attack_cfg.epsilon)
        else:
            adversarial = pgd(classifier, ds.images, ds.labels, attack_cfg,
                              rng=rng.child("attack"))
    records = []
    for i in range(len(ds)):
        times: dict = {}
        pc = purify(ds.images[i], sr_net, purify_cfg, rng.child(("purify-clean", i)))
        pa = purify(adversarial[i], sr_net, purify_cfg, rng.child(("purify-adv", i)),
                    times=times)
        records.append({
            "index": i,
            "label": int(ds.labels[i]),
            "clean_pred": _pred(classifier, pc),
            "adv_pred": _pred(classifier, adversarial[i]),
            "purified_adv_pred": _pred(classifier, pa),
            "aa_time": times.get("aa_time", 0.0),
            "sr_time": times.get("sr_time", 0.0),
            "resize_time": times.get("resize_time", 0.0),
        })
    report = report_from_records(records, attack_cfg, rng.seed)
    return report, records


def report_from_records(records: list, attack_cfg: AttackConfig, seed: int) -> EvalReport:
    n = len(records)
    standard = 100.0 * sum(r["clean_pred"] == r["label"] for r in records) / max(n, 1)
    robust = 100.0 * sum(r["purified_adv_pred"] == r["label"] for r in records) / max(n, 1)
    timing_rows = records[1:] if n > 1 else records  # warmup exclusion
    per_stage = {}
    for stage in ("aa_time", "sr_time", "resize_time"):
        vals = sorted(r[stage] for r in timing_rows)
        if vals:
            per_stage[stage.replace("_time", "")] = {
                "mean": sum(vals) / len(vals),
                "p50": vals[len(vals) // 2],
                "p95": vals[min(len(vals) - 1, int(0.95 * len(vals)))],
            }
    meta = {"method": attack_cfg.method, "epsilon": attack_cfg.epsilon,
            "steps": attack_cfg.steps, "step_size": attack_cfg.step_size,
            "eot_samples": attack_cfg.eot_samples, "bpda": attack_cfg.bpda,
            "rand_init": attack_cfg.rand_init, "restarts": attack_cfg.restarts}
    return EvalReport(standard_acc=standard, robust_acc=robust, n=n,
                      per_stage_time=per_stage, attack_meta=meta, seed=seed)


def write_records_csv(path, records: list) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=RECORD_FIELDS)
        writer.writeheader()
        writer.writerows(records)


def ablate(classifier: ClassifierNet, sr_net: DenoiserNet, ds: LabeledDataset,
           attack_cfg: AttackConfig, base_cfg: PurifyConfig, rng: RngState,
           kernels: Optional[dict] = None,
           step_counts: Sequence[int] = (4, 15, 50)) -> list:
    """Sweep filter shapes and sampler step counts; one attack set is shared
    across the grid. Returns rows of (config, standard, robust, mean SR
    seconds)."""
    if kernels is None:
        kernels = {
            "2x2": FilterKernel.mean(2, 2),
            "3x3": FilterKernel.mean(3, 3),
            "3x5": FilterKernel.mean(3, 5, exclude_center=True),
            "5x5": FilterKernel.mean(5, 5),
        }
    adv = pgd(classifier, ds.images, ds.labels, attack_cfg, rng=rng.child("attack"))
    rows = []
    for kname, kernel in kernels.items():
        for steps in step_counts:
            cfg = PurifyConfig(
                kernel=kernel,
                sched=ResShiftSchedule.geometric(T=steps, kappa=base_cfg.sched.kappa),
                sr_input_size=base_cfg.sr_input_size,
                classifier_size=base_cfg.classifier_size,
                quantize_stage=base_cfg.quantize_stage,
            )
            report, _ = evaluate_defense(classifier, sr_net, ds, attack_cfg, cfg,
                                         rng.child(("ablate", kname, steps)),
                                         adversarial=adv)
            rows.append({
                "kernel": kname, "steps": steps,
                "standard_acc": report.standard_acc,
                "robust_acc": report.robust_acc,
                "sr_time_mean": report.per_stage_time.get("sr", {}).get("mean", 0.0),
            })
    return rows
