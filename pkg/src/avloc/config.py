"""Run configuration: a flat TOML file whose keys mirror :class:`RunConfig`."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .losses import LossConfig
from .recursion import FinalMapWeights
from .synthdata import SceneSpec

# full-scale values from the original training setup
FULL_SCALE = {
    "image_size": 224,
    "channels": 512,
    "batch_size": 128,
    "epochs": 100,
}


@dataclass
class RunConfig:
    seed: int = 0
    # data
    num_classes: int = 8
    image_size: int = 64
    spec_size: int = 64
    object_scale_min: float = 0.3
    object_scale_max: float = 0.5
    distractor_count: int = 1
    n_train: int = 2000
    n_test: int = 200
    # model
    grid: int = 7
    channels: int = 32
    visual_widths: list[int] = field(default_factory=lambda: [16, 32, 32])
    audio_widths: list[int] = field(default_factory=lambda: [16, 32, 32, 32])
    temperature: float = 1.0
    recursion_steps: int = 1
    spec_offset: float = -12.0
    spec_scale: float = 3.0
    # losses
    tau: float = 0.03
    delta: float = 25.0
    lambda1: float = 1.0
    lambda2: float = 10.0
    ssl_pos_thresh: float = 0.65
    ssl_neg_thresh: float = 0.4
    ssl_temp: float = 0.07
    ssl_mask_temp: float = 0.03
    # final map
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0
    # optimisation
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 16
    epochs: int = 8
    max_steps: int = 0
    # evaluation / io
    act_thresh: float = 0.5
    data_dir: str = ""
    out_dir: str = ""

    def loss_config(self) -> LossConfig:
        return LossConfig(self.tau, self.delta, self.lambda1, self.lambda2, self.ssl_pos_thresh,
                          self.ssl_neg_thresh, self.ssl_temp, self.ssl_mask_temp)

    def final_weights(self) -> FinalMapWeights:
        return FinalMapWeights(self.w1, self.w2, self.w3)

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(self.seed, self.num_classes, self.image_size, self.spec_size,
                         (self.object_scale_min, self.object_scale_max), self.distractor_count)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def desk_scale_notes(self) -> list[str]:
        return [f"{k} = {getattr(self, k)} (full-scale setting: {v})"
                for k, v in FULL_SCALE.items() if getattr(self, k) != v]


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def config_from_dict(values: dict) -> RunConfig:
    unknown = sorted(set(values) - set(_FIELDS))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    cfg = RunConfig()
    for key, value in values.items():
        default = getattr(cfg, key)
        if isinstance(default, bool) or isinstance(value, bool):
            ok = isinstance(value, bool) and isinstance(default, bool)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float))
            value = float(value)
        elif isinstance(default, int):
            ok = isinstance(value, int)
        elif isinstance(default, list):
            ok = isinstance(value, list) and all(isinstance(v, int) for v in value)
        else:
            ok = isinstance(value, type(default))
        if not ok:
            raise ValueError(f"config key {key!r}: expected {type(default).__name__}, got {value!r}")
        setattr(cfg, key, value)
    return cfg


def load_config(path) -> RunConfig:
    with open(path, "rb") as fh:
        return config_from_dict(tomli.load(fh))


def dump_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))
