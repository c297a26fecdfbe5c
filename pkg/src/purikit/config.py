"""Run configuration: strict JSON parsing, profiles, epsilon fractions.

A config is a flat JSON document with one section per module. Unknown keys
fail before any compute. Two built-in profiles supply defaults: ``cifar-desk``
(32x32 inputs, 2x2 mean filter, 64x64 SR working size) and ``highres-desk``
(96x96 inputs, 3x5 center-excluded filter, resolution-preserving deblur).
Epsilon-like values accept fraction strings such as "8/255".
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .antialias import CIFAR_KERNEL, HIGHRES_KERNEL, FilterKernel
from .attacks import AttackConfig
from .ddpm import VPSchedule
from .finetune import FinetuneConfig
from .models import ClassifierTrainConfig
from .pipeline import PurifyConfig
from .resshift import ResShiftSchedule, SRTrainConfig

__all__ = ["ConfigError", "RunConfig", "parse_eps", "load_config", "PROFILES"]

SEED_ENV_VAR = "PURIKIT_SEED"


class ConfigError(ValueError):
    pass


def parse_eps(value) -> float:
    """Accept decimals or fraction strings like '8/255'."""
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        if "/" in value:
            num, den = value.split("/", 1)
            try:
                return float(num) / float(den)
            except (ValueError, ZeroDivisionError):
                raise ConfigError(f"bad fraction {value!r}") from None
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"bad number {value!r}") from None
    raise ConfigError(f"cannot parse epsilon from {value!r}")


_DEFAULTS: dict = {
    "profile": "cifar-desk",
    "seed": 0,
    "output_dir": "runs",
    "dataset": {
        "train": "data/train.bin",
        "test": "data/test.bin",
        "format": "raw-bin",
        "num_classes": 10,
        "image_size": 32,
        "train_count": 5000,
        "test_count": 1000,
    },
    "kernel": CIFAR_KERNEL,
    "ddpm": {"T": 50, "beta_min": 1e-4, "beta_max": 0.02},
    "resshift": {"T": 15, "kappa": 2.0, "sqrt_eta_min": 0.04, "sqrt_eta_max": 0.999},
    "attack": {
        "method": "pgd-linf", "eps": "8/255", "steps": 40, "step_size": None,
        "eot": 1, "bpda": False, "rand_init": True, "restarts": 1,
    },
    "classifier_train": {"epochs": 8, "learning_rate": 1e-3, "batch_size": 64,
                         "val_fraction": 0.1},
    "sr_train": {"iterations": 2000, "batch_size": 16, "learning_rate": 1e-3,
                 "degrade_noise_sigma": 0.05},
    "finetune": {
        "lambda": 0.1, "tau": 0.2, "noise_sigma": 0.05, "iterations": 300,
        "learning_rate": 2e-4, "batch_size": 16, "contrastive_weight": 1.0,
        "negative_eps": "4/255", "negative_steps": 10, "subset": 512,
    },
    "purify": {"sr_input_size": [64, 64], "classifier_size": [32, 32],
               "quantize_stage": True, "aa_first": True, "repeats": 1},
    "eval": {"n": 256, "ablate_n": 64, "bench_reps": 100},
    "checkpoints": {"classifier": None, "sr": None, "sr_finetuned": None},
}

PROFILES: dict = {
    "cifar-desk": {},  # the defaults above
    "highres-desk": {
        "dataset": {"image_size": 96},
        "kernel": HIGHRES_KERNEL,
        "purify": {"sr_input_size": [96, 96], "classifier_size": [96, 96]},
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and key not in ("kernel",):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a section object")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


@dataclass
class RunConfig:
    """Resolved configuration with typed accessors for each module."""

    raw: dict = field(default_factory=lambda: copy.deepcopy(_DEFAULTS))

    @property
    def seed(self) -> int:
        env = os.environ.get(SEED_ENV_VAR)
        return int(env) if env is not None else int(self.raw["seed"])

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output_dir"])

    def kernel(self) -> FilterKernel:
        return FilterKernel.from_list(self.raw["kernel"])

    def vp_schedule(self) -> VPSchedule:
        d = self.raw["ddpm"]
        return VPSchedule.linear_beta(T=d["T"], beta_min=d["beta_min"], beta_max=d["beta_max"])

    def rs_schedule(self, T: Optional[int] = None) -> ResShiftSchedule:
        r = self.raw["resshift"]
        return ResShiftSchedule.geometric(
            T=T or r["T"], kappa=r["kappa"],
            sqrt_eta_min=r["sqrt_eta_min"], sqrt_eta_max=r["sqrt_eta_max"])

    def attack(self) -> AttackConfig:
        a = self.raw["attack"]
        step = a["step_size"]
        return AttackConfig(
            method=a["method"], epsilon=parse_eps(a["eps"]), steps=a["steps"],
            step_size=parse_eps(step) if step is not None else None,
            eot_samples=a["eot"], bpda=a["bpda"], rand_init=a["rand_init"],
            restarts=a["restarts"])

    def classifier_train(self) -> ClassifierTrainConfig:
        c = self.raw["classifier_train"]
        return ClassifierTrainConfig(epochs=c["epochs"], learning_rate=c["learning_rate"],
                                     batch_size=c["batch_size"], val_fraction=c["val_fraction"])

    def sr_train(self) -> SRTrainConfig:
        s = self.raw["sr_train"]
        return SRTrainConfig(iterations=s["iterations"], batch_size=s["batch_size"],
                             learning_rate=s["learning_rate"])

    def finetune(self) -> FinetuneConfig:
        f = self.raw["finetune"]
        return FinetuneConfig(
            lam=f["lambda"], tau=f["tau"], noise_sigma=f["noise_sigma"],
            iterations=f["iterations"], learning_rate=f["learning_rate"],
            batch_size=f["batch_size"], contrastive_weight=f["contrastive_weight"],
            negative_eps=parse_eps(f["negative_eps"]), negative_steps=f["negative_steps"],
            sr_size=tuple(self.raw["purify"]["sr_input_size"]))

    def purify(self, steps: Optional[int] = None) -> PurifyConfig:
        p = self.raw["purify"]
        return PurifyConfig(
            kernel=self.kernel(), sched=self.rs_schedule(T=steps),
            sr_input_size=tuple(p["sr_input_size"]),
            classifier_size=tuple(p["classifier_size"]),
            quantize_stage=p["quantize_stage"], aa_first=p["aa_first"],
            repeats=p["repeats"])

    def to_json(self) -> str:
        resolved = copy.deepcopy(self.raw)
        resolved["seed"] = self.seed
        return json.dumps(resolved, indent=2, sort_keys=True)


def load_config(source: Any) -> RunConfig:
    """Build a RunConfig from a path, JSON string, or dict; strict keys."""
    if isinstance(source, (str, Path)) and Path(source).exists():
        doc = json.loads(Path(source).read_text())
    elif isinstance(source, str):
        doc = json.loads(source)
    elif isinstance(source, dict):
        doc = source
    elif source is None:
        doc = {}
    else:
        raise ConfigError(f"cannot load config from {type(source).__name__}")
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    profile = doc.get("profile", _DEFAULTS["profile"])
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    base = _merge(_DEFAULTS, PROFILES[profile])
    return RunConfig(raw=_merge(base, doc))
