"""The two-stage localization network and its Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import stage1_forward
from .autodiff import Tensor
from .config import RunConfig
from .encoders import build_audio_encoder, build_visual_encoder, gap_normalized
from .losses import LossConfig, avpm_loss, spatial_distribution, sra_loss, ssl_loss, total_loss
from .recursion import FinalMapWeights, final_map, stage2_forward


@dataclass
class ForwardOutput:
    feat_v: Tensor
    feat_a: Tensor
    vec_a: Tensor
    sim_v: Tensor
    map_v: Tensor
    map_a: Tensor
    map_av: Tensor
    images_att: Tensor
    feat_v_att: Tensor
    map_v_att: Tensor
    map_final: Tensor


class LocalizationModel:
    """Shared visual encoder plus audio encoder, run through both stages."""

    def __init__(self, cfg: RunConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.visual = build_visual_encoder(cfg.image_size, cfg.grid, cfg.visual_widths, cfg.channels, rng)
        self.audio = build_audio_encoder((cfg.spec_size, cfg.spec_size), cfg.grid, cfg.audio_widths,
                                         cfg.channels, rng)

    def parameters(self) -> dict[str, Tensor]:
        return {**self.visual.parameters(), **self.audio.parameters()}

    def load_parameters(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(arrays) != set(params):
            raise ValueError("parameter names do not match the model layout")
        for name, t in params.items():
            if arrays[name].shape != t.shape:
                raise ValueError(f"{name}: shape {arrays[name].shape} != {t.shape}")
            t.data = np.array(arrays[name], dtype=np.float64)

    def prepare_spectrograms(self, spectrograms) -> Tensor:
        return (ad.as_tensor(spectrograms) - self.cfg.spec_offset) * (1.0 / self.cfg.spec_scale)

    def forward(self, images, spectrograms, weights: FinalMapWeights | None = None) -> ForwardOutput:
        cfg = self.cfg
        weights = weights if weights is not None else cfg.final_weights()
        s1 = stage1_forward(images, self.prepare_spectrograms(spectrograms), self.visual, self.audio,
                            cfg.temperature)
        s2 = stage2_forward(images, s1.map_av, s1.vec_a, self.visual, cfg.temperature,
                            steps=cfg.recursion_steps, map_a=s1.map_a)
        m_final = final_map(s1.map_v, s1.map_a, s2.map_v_att, weights)
        return ForwardOutput(s1.feat_v, s1.feat_a, s1.vec_a, s1.sim_v, s1.map_v, s1.map_a, s1.map_av,
                             s2.images_att, s2.feat_v_att, s2.map_v_att, m_final)


def _term(name, fn, *args):
    try:
        return fn(*args)
    except FloatingPointError as exc:
        raise FloatingPointError(f"loss term {name}: {exc}") from exc


def loss_terms(out: ForwardOutput, cfg: LossConfig) -> dict[str, Tensor]:
    l_ssl = _term("ssl", ssl_loss, out.feat_v, out.vec_a, cfg)
    l_avpm = _term("avpm", avpm_loss, gap_normalized(out.feat_v_att), gap_normalized(out.feat_v), out.vec_a, cfg)
    l_sra = _term("sra", sra_loss, spatial_distribution(out.feat_v_att), spatial_distribution(out.feat_a))
    return {"ssl": l_ssl, "avpm": l_avpm, "sra": l_sra, "total": total_loss(l_ssl, l_avpm, l_sra, cfg)}


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            p.data = p.data - self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
