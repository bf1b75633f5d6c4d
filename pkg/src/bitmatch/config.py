"""Run configuration: one JSON document, strict about unknown keys."""

from __future__ import annotations

import json
from dataclasses import dataclass

from .qascore import QaConfig
from .synthdata import ConfigError, GenConfig

DEFAULTS = {
    "seed": 1234,
    "gen": {
        "num_identities": 50,
        "vis_per_id": 8,
        "ir_per_id": 4,
        "num_patches": 8,
        "raw_dim": 16,
        "noise_sigma": 0.1,
        "collision_groups": 10,
    },
    "encoder": {
        "embed_dim": 32,
        "self_attn_depth": 2,
        "heads": 1,
    },
    "bci": {
        "depth": 3,
        "embed_dim": 32,
        "heads": 1,
    },
    "qa": {
        "k": 3,
        "alpha": 0.20,
        "lambda": 0.6,
    },
    "optim": {
        "stage1": {"lr": 3e-4, "weight_decay": 1e-4, "beta1": 0.9,
                   "beta2": 0.999, "eps": 1e-8, "min_lr": 3e-6},
        "stage2": {"lr": 3e-4, "weight_decay": 1e-4, "beta1": 0.9,
                   "beta2": 0.999, "eps": 1e-8, "min_lr": 3e-6},
    },
    "stage1_epochs": 8,
    "stage2_epochs": 12,
    "batch": {"p": 4, "k": 4},
}


def _merge_strict(defaults, overrides, path=""):
    if not isinstance(overrides, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    unknown = set(overrides) - set(defaults)
    if unknown:
        raise ConfigError(
            f"unknown config key(s) {sorted(unknown)} in {path or '<root>'}")
    merged = {}
    for key, default in defaults.items():
        if key in overrides and isinstance(default, dict):
            merged[key] = _merge_strict(default, overrides[key],
                                        f"{path}{key}.")
        elif key in overrides:
            merged[key] = overrides[key]
        else:
            merged[key] = json.loads(json.dumps(default))
    return merged


@dataclass
class RunConfig:
    raw: dict

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def with_seed(self, seed: int) -> "RunConfig":
        doc = json.loads(json.dumps(self.raw))
        doc["seed"] = int(seed)
        return RunConfig(raw=doc)

    def gen_config(self) -> GenConfig:
        return GenConfig(seed=self.seed, **self.raw["gen"]).validate()

    def qa_config(self) -> QaConfig:
        q = self.raw["qa"]
        return QaConfig(k=q["k"], alpha=q["alpha"], lam=q["lambda"]).validate()

    @property
    def embed_dim(self) -> int:
        return int(self.raw["encoder"]["embed_dim"])

    @property
    def bci_depth(self) -> int:
        return int(self.raw["bci"]["depth"])

    @property
    def heads(self) -> int:
        return int(self.raw["encoder"]["heads"])

    @property
    def stage1_epochs(self) -> int:
        return int(self.raw["stage1_epochs"])

    @property
    def stage2_epochs(self) -> int:
        return int(self.raw["stage2_epochs"])

    @property
    def batch_p(self) -> int:
        return int(self.raw["batch"]["p"])

    @property
    def batch_k(self) -> int:
        return int(self.raw["batch"]["k"])

    def optim(self, stage: int) -> dict:
        return self.raw["optim"][f"stage{stage}"]

    def validate(self) -> "RunConfig":
        self.gen_config()
        self.qa_config()
        if self.raw["bci"]["embed_dim"] != self.raw["encoder"]["embed_dim"]:
            raise ConfigError("bci.embed_dim must equal encoder.embed_dim")
        if self.raw["bci"]["heads"] != self.raw["encoder"]["heads"]:
            raise ConfigError("bci.heads must equal encoder.heads")
        if self.stage1_epochs < 1 or self.stage2_epochs < 1:
            raise ConfigError("stage epochs must be >= 1")
        if self.batch_p < 1 or self.batch_k < 1:
            raise ConfigError("batch p and k must be >= 1")
        if self.embed_dim % self.heads != 0:
            raise ConfigError("heads must divide embed_dim")
        for stage in (1, 2):
            opt = self.optim(stage)
            if opt["lr"] <= 0 or opt["min_lr"] > opt["lr"]:
                raise ConfigError(f"bad optimizer config for stage {stage}")
        if self.qa_config().k > self.gen_config().num_patches:
            raise ConfigError("qa.k must not exceed gen.num_patches")
        return self


def default_config() -> RunConfig:
    return RunConfig(raw=json.loads(json.dumps(DEFAULTS))).validate()


def from_dict(doc: dict) -> RunConfig:
    return RunConfig(raw=_merge_strict(DEFAULTS, doc)).validate()


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return from_dict(doc)
