"""Recursive attention (stage 2) and the final map combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import integrate_maps, similarity_map, softmax_map
from .autodiff import Tensor
from .encoders import ConvEncoder, encode_visual


@dataclass(frozen=True)
class FinalMapWeights:
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0

    def __post_init__(self):
        ws = (self.w1, self.w2, self.w3)
        if min(ws) < 0 or max(ws) == 0:
            raise ValueError(f"final map weights must be >= 0 and not all zero, got {ws}")


def resize_map(loc_map, height: int, width: int) -> Tensor:
    """Bilinear upsample of an (N,h,w) map to (N,height,width)."""
    loc_map = ad.as_tensor(loc_map)
    if height <= 0 or width <= 0:
        raise ValueError(f"invalid target size {(height, width)}")
    n, h, w = loc_map.shape
    up = ad.bilinear_resize(ad.reshape(loc_map, (n, h, w, 1)), height, width)
    return ad.reshape(up, (n, height, width))


def attend_image(images, resized_map) -> Tensor:
    """Gate images by the resized map rescaled to a per-sample max of 1."""
    images, resized_map = ad.as_tensor(images), ad.as_tensor(resized_map)
    if images.shape[:3] != resized_map.shape:
        raise ad.ShapeError(f"attend_image: image shape {images.shape} does not match map shape {resized_map.shape}")
    n, h, w = resized_map.shape
    gate = ad.reshape(resized_map, (n, h, w, 1))
    peak = ad.amax(gate, axis=(1, 2, 3), keepdims=True)
    if np.any(peak.data <= 0):
        raise FloatingPointError("attend_image: map has no positive value")
    return images * (gate / peak)


@dataclass
class Stage2Output:
    images_att: Tensor
    feat_v_att: Tensor
    map_v_att: Tensor


def stage2_forward(images, map_av, vec_a, visual: ConvEncoder, temperature: float = 1.0,
                   steps: int = 1, map_a=None) -> Stage2Output:
    """Re-encode the attended image with the shared visual encoder.

    With ``steps > 1`` each further pass gates with the integration of the
    previous attentive map and ``map_a``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    images = ad.as_tensor(images)
    _, height, width, _ = images.shape
    gate_map = map_av
    for step in range(steps):
        images_att = attend_image(images, resize_map(gate_map, height, width))
        feat_v_att = encode_visual(images_att, visual)
        map_v_att = softmax_map(similarity_map(feat_v_att, vec_a), temperature)
        if step + 1 < steps:
            gate_map = integrate_maps(map_v_att, map_a) if map_a is not None else map_v_att
    return Stage2Output(images_att, feat_v_att, map_v_att)


def final_map(map_v, map_a, map_v_att, weights: FinalMapWeights = FinalMapWeights()) -> Tensor:
    map_v, map_a, map_v_att = (ad.as_tensor(m) for m in (map_v, map_a, map_v_att))
    if not (map_v.shape == map_a.shape == map_v_att.shape):
        raise ad.ShapeError(f"final_map: shapes {map_v.shape}, {map_a.shape}, {map_v_att.shape} differ")
    return map_v * weights.w1 + map_a * weights.w2 + map_v_att * weights.w3
