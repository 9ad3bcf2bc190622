"""Training objectives.

Global vectors are ``(N, c)`` unit rows, feature maps ``(N, h, w, c)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import minmax_normalize
from .autodiff import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.03
    delta: float = 25.0
    lambda1: float = 1.0
    lambda2: float = 10.0
    ssl_pos_thresh: float = 0.65
    ssl_neg_thresh: float = 0.4
    ssl_temp: float = 0.07
    ssl_mask_temp: float = 0.03

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.delta < 0 or self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("delta and lambdas must be nonnegative")
        if self.ssl_pos_thresh < self.ssl_neg_thresh:
            raise ValueError("ssl_pos_thresh must be >= ssl_neg_thresh")
        if self.ssl_temp <= 0 or self.ssl_mask_temp <= 0:
            raise ValueError("ssl temperatures must be positive")


def scaled_sq_dist(a, b, tau: float) -> Tensor:
    """``||(a - b) / tau||^2`` along the last axis."""
    diff = (ad.as_tensor(a) - ad.as_tensor(b)) * (1.0 / tau)
    return ad.sum_(diff * diff, axis=-1)


def triplet_term(anchor, pos, neg, tau: float, delta: float) -> Tensor:
    return scaled_sq_dist(anchor, pos, tau) + ad.relu(delta - scaled_sq_dist(anchor, neg, tau))


def _pairwise_sq_dist(a: Tensor, b: Tensor, tau: float) -> Tensor:
    n, c = a.shape
    return scaled_sq_dist(ad.reshape(a, (n, 1, c)), ad.reshape(b, (1, n, c)), tau)


def avpm_loss(vec_v_att, vec_v, vec_a, cfg: LossConfig) -> Tensor:
    """Triplet pair-matching loss averaged over ordered pairs ``i != j``.

    Anchor is the attentive-visual vector; positives are the same sample's
    audio and visual vectors, negatives those of sample ``j``.
    """
    vec_v_att, vec_v, vec_a = (ad.as_tensor(v) for v in (vec_v_att, vec_v, vec_a))
    n = vec_v_att.shape[0]
    if n < 2:
        log.warning("avpm_loss: batch of %d has no negatives; returning 0", n)
        return ad.mul(ad.sum_(vec_v_att), 0.0)
    off_diag = 1.0 - np.eye(n)
    d_a = _pairwise_sq_dist(vec_v_att, vec_a, cfg.tau)
    d_v = _pairwise_sq_dist(vec_v_att, vec_v, cfg.tau)
    # each positive distance appears once per negative j != i
    pos = (n - 1) * ad.sum_(d_a * np.eye(n) + d_v * np.eye(n))
    hinge = ad.sum_((ad.relu(cfg.delta - d_a) + ad.relu(cfg.delta - d_v)) * off_diag)
    return (pos + hinge) * (1.0 / (n * (n - 1)))


def spatial_distribution(features) -> Tensor:
    """Channel-sum, per-sample min-max over the grid, flatten, softmax."""
    features = ad.as_tensor(features)
    n, h, w, _ = features.shape
    summed = minmax_normalize(ad.sum_(features, axis=-1))
    return ad.softmax(ad.reshape(summed, (n, h * w)), axis=-1)


def sra_loss(dist_v_att, dist_a) -> Tensor:
    """Mean KL(target || dist_a); the attentive-visual target is not differentiated."""
    target = ad.detach(dist_v_att).data
    dist_a = ad.as_tensor(dist_a)
    if target.shape != dist_a.shape:
        raise ad.ShapeError(f"sra_loss: shapes {target.shape} and {dist_a.shape} differ")
    if np.any(target <= 0) or np.any(dist_a.data <= 0):
        raise ValueError("sra_loss: distributions must be strictly positive")
    n = target.shape[0]
    kl = ad.sum_(target * (np.log(target) - ad.log(dist_a)))
    return kl * (1.0 / n)


def ssl_loss(feat_v, vec_a, cfg: LossConfig) -> Tensor:
    """Contrastive localization loss with soft tri-map masks.

    For audio ``i`` and image ``j`` the cosine response map ``A[i, j]`` is
    pooled over its soft foreground ``sigmoid((A - pos_thresh) / mask_temp)``.
    The logits of row ``i`` are the pooled responses for every image (the
    diagonal is the positive) plus one background logit pooling ``A[i, i]``
    over ``1 - sigmoid((A - neg_thresh) / mask_temp)``.
    """
    feat_v, vec_a = ad.as_tensor(feat_v), ad.as_tensor(vec_a)
    n, h, w, c = feat_v.shape
    if n < 2:
        raise ValueError("ssl_loss needs a batch of at least 2")
    unit_f = ad.reshape(ad.l2_normalize(feat_v, axis=-1), (n * h * w, c))
    unit_a = ad.l2_normalize(vec_a, axis=-1)
    # resp[i, j, p] = <audio i, image j at cell p>
    resp = ad.transpose(ad.reshape(unit_f @ ad.transpose(unit_a, (1, 0)), (n, h * w, n)), (2, 0, 1))
    inv_mt = 1.0 / cfg.ssl_mask_temp
    fg = ad.sigmoid((resp - cfg.ssl_pos_thresh) * inv_mt)
    pooled = ad.sum_(fg * resp, axis=-1) / ad.sum_(fg, axis=-1)

    eye = np.eye(n)
    own = ad.sum_(resp * eye[:, :, None], axis=1)
    bg = ad.sigmoid((cfg.ssl_neg_thresh - own) * inv_mt)
    bg_pooled = ad.sum_(bg * own, axis=-1, keepdims=True) / ad.sum_(bg, axis=-1, keepdims=True)

    logits = ad.concatenate([pooled, bg_pooled], axis=1) * (1.0 / cfg.ssl_temp)
    positive = ad.sum_(pooled * eye, axis=1) * (1.0 / cfg.ssl_temp)
    return ad.mean(ad.logsumexp(logits, axis=1) - positive)


def total_loss(l_ssl, l_avpm, l_sra, cfg: LossConfig) -> Tensor:
    for name, part in (("ssl", l_ssl), ("avpm", l_avpm), ("sra", l_sra)):
        value = float(np.asarray(ad.as_tensor(part).data))
        if not math.isfinite(value):
            raise FloatingPointError(f"loss term {name} is not finite ({value})")
    return ad.as_tensor(l_ssl) + ad.as_tensor(l_avpm) * cfg.lambda1 + ad.as_tensor(l_sra) * cfg.lambda2
