"""Run configuration: nested dataclasses, named presets and JSON overrides."""
from __future__ import annotations

import copy
import dataclasses
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional

from .data import PhantomConfig
from .networks import AutoencoderConfig, ConditionEncoderConfig, UNetConfig

OUTPUT_ROOT_ENV = "PSEUDOMRI_OUTPUT_ROOT"
PRESETS = ("desk-scale", "paper-scale")


class ConfigError(ValueError):
    pass


@dataclass
class PathConfig:
    output_root: str = "runs"
    dataset: str = "data"
    ae_checkpoint: str = "ae.ckpt"
    diff_checkpoint: str = "diff.ckpt"

    def resolve(self, name: str) -> Path:
        p = Path(getattr(self, name))
        return p if p.is_absolute() else Path(self.output_root) / p


@dataclass
class DataConfig:
    n: int = 20
    split_ratio: float = 0.7
    phantom: PhantomConfig = field(default_factory=PhantomConfig)


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class TrainConfig:
    lr: float = 1e-4
    ae_lr: float = 1e-4
    batch_size: int = 8
    ae_steps: int = 2000
    diff_steps: int = 5000
    classifier_steps: int = 300
    warmup_steps: int = 100
    weight_decay: float = 0.01
    ema_decay: float = 0.99
    kl_weight: float = 1e-6
    latent_scale: float = 0.2
    eval_every: int = 50
    patience: int = 10  # evaluations without improvement before early stop
    stop_below: Optional[float] = None  # optional early exit once the tracked loss drops below this
    checkpoint_every: int = 500
    label_mode: str = "label"  # "label": smoothed ground-truth grade; "classifier": trained stub
    sample_latents: bool = True  # draw z0 from the posterior (False: use its mean)
    max_slices: Optional[int] = None  # restrict stage 1 to the first N training slices


@dataclass
class InferConfig:
    s: int = 16
    steps: int = 50
    workers: int = 1
    shared_noise: bool = False
    s_list: list[int] = field(default_factory=lambda: [8, 16, 32])
    clip_latents: bool = True  # clamp predicted z0 to the training latent range during DDIM


@dataclass
class MetricConfig:
    ssim_window: int = 11
    k1: float = 0.01
    k2: float = 0.03
    peak: float = 2.0
    canny_sigma: float = 3.0
    canny_low: float = 0.1
    canny_high: float = 0.2
    region: Optional[list[int]] = None  # [row0, row1, col0, col1]; phantoms carry their own


@dataclass
class RunConfig:
    preset: str = "desk-scale"
    seed: int = 0
    paths: PathConfig = field(default_factory=PathConfig)
    data: DataConfig = field(default_factory=DataConfig)
    autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    cond_encoder: ConditionEncoderConfig = field(default_factory=ConditionEncoderConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def validate(self) -> "RunConfig":
        t, s, i = self.train, self.schedule, self.infer
        checks = [
            (self.preset in PRESETS, f"unknown preset {self.preset!r}"),
            (s.T >= 1 and 0 < s.beta_start <= s.beta_end < 1, "schedule needs T >= 1 and 0 < beta_start <= beta_end < 1"),
            (t.lr > 0 and t.ae_lr > 0, "learning rates must be positive"),
            (t.batch_size >= 1, "batch_size must be >= 1"),
            (min(t.ae_steps, t.diff_steps, t.classifier_steps) >= 0, "step counts must be >= 0"),
            (t.warmup_steps >= 0 and t.eval_every >= 1 and t.patience >= 1, "bad warm-up/eval/patience"),
            (0 <= t.ema_decay < 1, "ema_decay must lie in [0, 1)"),
            (t.kl_weight >= 0 and t.latent_scale > 0, "kl_weight >= 0 and latent_scale > 0 required"),
            (t.label_mode in ("label", "classifier"), "label_mode must be 'label' or 'classifier'"),
            (t.checkpoint_every >= 1, "checkpoint_every must be >= 1"),
            (i.s >= 2 and all(v >= 2 for v in i.s_list), "slice counts must be >= 2"),
            (1 <= i.steps <= s.T, "inference steps must lie in [1, T]"),
            (i.workers >= 1, "workers must be >= 1"),
            (self.data.n >= 0 and 0 < self.data.split_ratio < 1, "bad dataset size or split ratio"),
            (self.metrics.ssim_window % 2 == 1, "SSIM window must be odd"),
            (self.metrics.region is None or len(self.metrics.region) == 4, "region needs 4 integers"),
            (self.autoencoder.input_resolution == self.data.phantom.resolution,
             "autoencoder input_resolution must equal the phantom resolution"),
            (self.unet.out_channels == self.autoencoder.latent_channels,
             "U-Net output channels must equal the latent channel count"),
            (len(self.cond_encoder.channel_multipliers) == len(self.autoencoder.channel_multipliers),
             "condition encoder must have as many stages as the autoencoder"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self


def desk_scale() -> RunConfig:
    return RunConfig()


def paper_scale() -> RunConfig:
    cfg = RunConfig(preset="paper-scale")
    cfg.data.phantom = PhantomConfig(resolution=256, slices=50)
    cfg.autoencoder = AutoencoderConfig(base_channels=128, channel_multipliers=[1, 2, 4, 4], res_blocks_per_stage=2,
                                        input_resolution=256, image_channels=3, norm_groups=32)
    cfg.unet = UNetConfig(base_channels=320, channel_multipliers=[1, 2, 4, 4], res_blocks_per_stage=2,
                          attention_resolutions=[4, 2, 1], attention_heads=8, context_dim=768, norm_groups=32)
    cfg.cond_encoder = ConditionEncoderConfig(base_channels=64, channel_multipliers=[1, 2, 4, 4], res_blocks_per_stage=2,
                                              norm_groups=32)
    cfg.train.lr = cfg.train.ae_lr = 1e-6
    cfg.train.batch_size = 64
    cfg.infer.s = 50
    cfg.infer.s_list = [30, 100, 200, 300, 400, 500]
    return cfg


def preset(name: str) -> RunConfig:
    if name == "desk-scale":
        return desk_scale()
    if name == "paper-scale":
        return paper_scale()
    raise ConfigError(f"unknown preset {name!r} (choose from {', '.join(PRESETS)})")


def _merge(obj, updates: dict, where: str):
    """Recursively apply a JSON mapping onto a dataclass instance; unknown keys are errors."""
    names = {f.name: f for f in fields(obj)}
    for key, val in updates.items():
        if key not in names:
            raise ConfigError(f"unknown config key {where}{key}")
        cur = getattr(obj, key)
        if is_dataclass(cur):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}{key} must be an object")
            _merge(cur, val, f"{where}{key}.")
        else:
            setattr(obj, key, copy.deepcopy(val))
    # re-run dataclass validation hooks on the updated section
    post = getattr(obj, "__post_init__", None)
    if post is not None:
        try:
            post()
        except ValueError as exc:
            raise ConfigError(f"{where or 'config'}: {exc}") from exc
    return obj


def load_config(path=None, preset_name: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Preset, then config file, then ``overrides`` (flat CLI values), then validation.

    A ``preset`` key in the file selects the base preset unless ``preset_name`` is given.
    """
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
    name = preset_name or doc.get("preset") or "desk-scale"
    cfg = preset(name)
    doc = dict(doc)
    doc.pop("preset", None)
    _merge(cfg, doc, "")
    cfg.preset = name
    env_root = os.environ.get(OUTPUT_ROOT_ENV)
    if env_root:
        cfg.paths.output_root = env_root
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        section, _, attr = key.rpartition(".")
        target = cfg
        for part in filter(None, section.split(".")):
            target = getattr(target, part)
        if not hasattr(target, attr):
            raise ConfigError(f"unknown override {key}")
        setattr(target, attr, val)
    return cfg.validate()


def from_dict(doc: dict) -> RunConfig:
    """Rebuild a config from :meth:`RunConfig.to_dict` output (e.g. a checkpoint header)."""
    doc = dict(doc)
    cfg = preset(doc.pop("preset", "desk-scale"))
    _merge(cfg, doc, "")
    return cfg


def replace(cfg: RunConfig, **sections) -> RunConfig:
    return dataclasses.replace(copy.deepcopy(cfg), **sections)
