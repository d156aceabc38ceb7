"""Stage configuration records, JSON config files and hierarchical seeding."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .augment import MODES
from .data import ToySpec
from .nnclr import HeadConfig
from .vit import DecoderConfig, ViTConfig

STAGES = ("pretrain", "head_init", "ct", "eval")
PRETRAIN_MASK_RATIO = 0.75

# integer codes so every (seed, stage, purpose) triple maps to its own stream
_STAGE_CODES = {"data": 0, "pretrain": 1, "head_init": 2, "ct": 3, "eval": 4}
_PURPOSE_CODES = {"init": 0, "shuffle": 1, "augment": 2, "mask": 3, "lookup": 4, "kmeans": 5, "split": 6, "probe": 7}


def stage_rng(seed: int, stage: str, purpose: str) -> np.random.Generator:
    """Independent generator per (seed, stage, purpose)."""
    return np.random.default_rng(np.random.SeedSequence([seed, _STAGE_CODES[stage], _PURPOSE_CODES[purpose]]))


@dataclass(frozen=True)
class StageConfig:
    stage: str = "pretrain"
    epochs: int = 20
    batch_size: int = 128
    base_lr: float = 1e-4
    weight_decay: float = 0.05
    warmup_fraction: float = 0.2
    tau: float = 0.2
    k: int = 20
    frozen_blocks: int = 0
    layer_decay: float = 0.65
    encoder_ema: float = 0.9999
    projector_ema: float = 0.99
    views: int = 1
    seed: int = 0
    augmentation: str = "crop_flip"
    # NNCLR head optimizer and queue
    head_lr: float = 1e-4
    head_weight_decay: float = 1e-5
    queue_capacity: int = 4096
    crop_scale_min: float = 0.2
    # masking: the MAE ratio during pretraining, the ablation ratio during CT;
    # None picks the stage default
    mask_ratio: float | None = None
    # combined / detached pretraining
    combined: bool = False
    lam: float = 0.001
    detached: bool = False
    # CT variants
    skip_init: bool = False
    oracle: bool = False
    # evaluation
    knn_k: int = 10
    probe_epochs: int = 50
    probe_warmup_epochs: int = 5
    probe_lrs: tuple[float, ...] = (0.1, 0.09, 0.08, 0.07, 0.06, 0.05, 0.04, 0.03, 0.02, 0.01)
    lowshot_shots: tuple[int, ...] = (1, 2, 5)
    lowshot_l2: float = 1e-3
    kmeans_restarts: int = 100
    hist_bins: int = 64
    hist_epochs: int = 10

    def problems(self) -> list[str]:
        out = []
        if self.stage not in STAGES:
            out.append(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.epochs < 0:
            out.append("epochs must be >= 0")
        if self.batch_size < 2:
            out.append("batch_size must be >= 2 (BatchNorm needs batch statistics)")
        if not 0 <= self.warmup_fraction < 1:
            out.append("warmup_fraction must lie in [0, 1)")
        if self.views not in (1, 2):
            out.append("views must be 1 or 2")
        for name in ("base_lr", "weight_decay", "head_lr", "head_weight_decay", "lam", "lowshot_l2"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be >= 0")
        if self.tau <= 0:
            out.append("tau must be > 0")
        if self.k < 1:
            out.append("k must be >= 1")
        if self.frozen_blocks < 0:
            out.append("frozen_blocks must be >= 0")
        if not 0 < self.layer_decay <= 1:
            out.append("layer_decay must lie in (0, 1]")
        for name in ("encoder_ema", "projector_ema"):
            if not 0 <= getattr(self, name) <= 1:
                out.append(f"{name} must lie in [0, 1]")
        if self.augmentation not in MODES:
            out.append(f"augmentation must be one of {MODES}")
        if self.mask_ratio is not None and not 0 <= self.mask_ratio < 1:
            out.append("mask_ratio must lie in [0, 1)")
        if not 0 < self.crop_scale_min <= 1:
            out.append("crop_scale_min must lie in (0, 1]")
        if self.queue_capacity < self.batch_size:
            out.append("queue_capacity must be >= batch_size")
        if self.knn_k < 1:
            out.append("knn_k must be >= 1")
        if self.kmeans_restarts < 1:
            out.append("kmeans_restarts must be >= 1")
        if self.hist_bins < 1:
            out.append("hist_bins must be >= 1")
        if not self.probe_lrs:
            out.append("probe_lrs must not be empty")
        return out

    def resolved_mask_ratio(self) -> float:
        if self.mask_ratio is not None:
            return self.mask_ratio
        return PRETRAIN_MASK_RATIO if self.stage == "pretrain" else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["probe_lrs"] = list(self.probe_lrs)
        d["lowshot_shots"] = list(self.lowshot_shots)
        return d


@dataclass(frozen=True)
class RunConfig:
    """A StageConfig plus the architecture and dataset sections of a config file."""

    stage: StageConfig = field(default_factory=StageConfig)
    vit: ViTConfig = field(default_factory=ViTConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    toy: ToySpec = field(default_factory=ToySpec)
    data_seed: int = 0
    train_path: str | None = None
    test_path: str | None = None
    encoder_checkpoint: str | None = None
    head_checkpoint: str | None = None

    def to_dict(self) -> dict:
        out = self.stage.to_dict()
        out.update({
            "vit": self.vit.to_dict(),
            "decoder": self.decoder.to_dict(),
            "head": self.head.to_dict(),
            "toy": self.toy.to_dict(),
            "data_seed": self.data_seed,
            "train_path": self.train_path,
            "test_path": self.test_path,
            "encoder_checkpoint": self.encoder_checkpoint,
            "head_checkpoint": self.head_checkpoint,
        })
        return out

    def with_stage(self, **changes) -> "RunConfig":
        return replace(self, stage=replace(self.stage, **changes))


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(problems))


_SECTIONS = {"vit": ViTConfig, "decoder": DecoderConfig, "head": HeadConfig, "toy": ToySpec}
_RUN_KEYS = {"data_seed", "train_path", "test_path", "encoder_checkpoint", "head_checkpoint"}


def _build(cls, raw, where: str, problems: list[str]):
    if not isinstance(raw, dict):
        problems.append(f"{where}: expected a mapping")
        return cls()
    known = {f.name for f in fields(cls)}
    for key in sorted(set(raw) - known):
        problems.append(f"{where}: unknown field {key!r}")
    kwargs = {k: v for k, v in raw.items() if k in known}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        problems.append(f"{where}: {err}")
        return cls()


def config_from_dict(raw: dict) -> RunConfig:
    """Validate a config mapping, collecting every problem before raising."""
    problems: list[str] = []
    stage_names = {f.name for f in fields(StageConfig)}
    stage_raw = {}
    sections = {}
    run_kwargs = {}
    sections_ok = True
    for key, value in raw.items():
        if key in stage_names:
            if key in ("probe_lrs", "lowshot_shots"):
                value = tuple(value)
            stage_raw[key] = value
        elif key in _SECTIONS:
            before = len(problems)
            sections[key] = _build(_SECTIONS[key], value, key, problems)
            sections_ok = sections_ok and len(problems) == before
        elif key in _RUN_KEYS:
            run_kwargs[key] = value
        else:
            problems.append(f"unknown field {key!r}")
    if "stage" in stage_raw and isinstance(stage_raw["stage"], str):
        stage_raw["stage"] = stage_raw["stage"].replace("-", "_")
    type_problems: list[str] = []
    for name in (f.name for f in fields(StageConfig)):
        if name in stage_raw:
            default = getattr(StageConfig(), name)
            value = stage_raw[name]
            if name == "mask_ratio":
                if value is not None and (isinstance(value, bool) or not isinstance(value, (int, float))):
                    type_problems.append(f"{name}: expected a number or null")
            elif isinstance(default, bool) and not isinstance(value, bool):
                type_problems.append(f"{name}: expected true/false")
            elif isinstance(default, (int, float)) and not isinstance(default, bool) and (
                isinstance(value, bool) or not isinstance(value, (int, float))
            ):
                type_problems.append(f"{name}: expected a number")
            elif isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float):
                type_problems.append(f"{name}: expected an integer")
    problems.extend(type_problems)
    stage = StageConfig()
    if not type_problems:
        stage = StageConfig(**stage_raw)
        problems.extend(stage.problems())
    cfg = RunConfig(stage=stage, **sections, **run_kwargs)
    if sections_ok:
        if cfg.stage.frozen_blocks > cfg.vit.depth:
            problems.append(f"frozen_blocks {cfg.stage.frozen_blocks} exceeds vit depth {cfg.vit.depth}")
        if cfg.head.in_dim != cfg.vit.embed_dim:
            problems.append(f"head.in_dim {cfg.head.in_dim} must equal vit.embed_dim {cfg.vit.embed_dim}")
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise ConfigError([f"{path}: not valid JSON ({err})"]) from None
    if not isinstance(raw, dict):
        raise ConfigError([f"{path}: top level must be an object"])
    return config_from_dict(raw)


def save_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
