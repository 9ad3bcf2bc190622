"""Audio-visual spatial integration (stage 1).

Maps are ``N x h x w`` tensors.  The audio-visual branch gates the visual
features with min-max-normalized audio features before the same
cosine-similarity attention is applied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import ConvEncoder, encode_audio, encode_visual, gap_normalized

DENOM_EPS = 1e-8


def cosine_map(features, vec) -> Tensor:
    """Per-cell cosine between ``features`` (N,h,w,c) and ``vec`` (N,c); zero vectors give 0."""
    features, vec = ad.as_tensor(features), ad.as_tensor(vec)
    if features.shape[-1] != vec.shape[-1] or features.shape[0] != vec.shape[0]:
        raise ad.ShapeError(f"similarity_map: feature shape {features.shape} does not match vector shape {vec.shape}")
    n, c = vec.shape
    unit_f = ad.l2_normalize(features, axis=-1)
    unit_v = ad.reshape(ad.l2_normalize(vec, axis=-1), (n, 1, 1, c))
    return ad.sum_(unit_f * unit_v, axis=-1)


def similarity_map(features, vec, eps: float = DENOM_EPS) -> Tensor:
    """Cosine map divided by its per-sample sum; uniform where that sum is ~0."""
    cos = cosine_map(features, vec)
    n, h, w = cos.shape
    total = ad.sum_(cos, axis=(1, 2), keepdims=True)
    degenerate = np.abs(total.data) < eps
    safe = ad.where(degenerate, 1.0, total)
    return ad.where(np.broadcast_to(degenerate, cos.shape), 1.0 / (h * w), cos / safe)


def softmax_map(sim, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    sim = ad.as_tensor(sim)
    n, h, w = sim.shape
    flat = ad.reshape(sim, (n, h * w))
    if temperature != 1.0:
        flat = flat / temperature
    return ad.reshape(ad.softmax(flat, axis=-1), (n, h, w))


def minmax_normalize(features, eps: float = DENOM_EPS) -> Tensor:
    """Per-sample min-max scaling of an (N, ...) tensor into [0, 1]."""
    features = ad.as_tensor(features)
    return ad.minmax_scale(features, axis=tuple(range(1, features.ndim)), eps=eps)


def fuse_features(visual, audio_normed) -> Tensor:
    visual, audio_normed = ad.as_tensor(visual), ad.as_tensor(audio_normed)
    if visual.shape != audio_normed.shape:
        raise ad.ShapeError(f"fuse_features: shapes {visual.shape} and {audio_normed.shape} differ")
    return visual * audio_normed


def integrate_maps(map_v, map_a) -> Tensor:
    map_v, map_a = ad.as_tensor(map_v), ad.as_tensor(map_a)
    if map_v.shape != map_a.shape:
        raise ad.ShapeError(f"integrate_maps: shapes {map_v.shape} and {map_a.shape} differ")
    return (map_a + map_v) * 0.5


@dataclass
class Stage1Output:
    feat_v: Tensor
    feat_a: Tensor
    vec_a: Tensor
    sim_v: Tensor
    map_v: Tensor
    map_a: Tensor
    map_av: Tensor


def stage1_forward(images, spectrograms, visual: ConvEncoder, audio: ConvEncoder,
                   temperature: float = 1.0) -> Stage1Output:
    feat_v = encode_visual(images, visual)
    feat_a = encode_audio(spectrograms, audio)
    if feat_v.shape != feat_a.shape:
        raise ad.ShapeError(f"stage1: visual features {feat_v.shape} and audio features {feat_a.shape} differ")
    vec_a = gap_normalized(feat_a)
    sim_v = similarity_map(feat_v, vec_a)
    map_v = softmax_map(sim_v, temperature)
    fused = fuse_features(feat_v, minmax_normalize(feat_a))
    map_a = softmax_map(similarity_map(fused, vec_a), temperature)
    return Stage1Output(feat_v, feat_a, vec_a, sim_v, map_v, map_a, integrate_maps(map_v, map_a))
