"""Model-level evaluation: run the network, upsample its maps and score them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import metrics
from .model import LocalizationModel
from .recursion import FinalMapWeights, resize_map
from .synthdata import SceneSet

MAP_NAMES = ("map_v", "map_a", "map_av", "map_v_att", "map_final")
COMPONENTS = ("map_v", "map_a", "map_v_att")


@dataclass
class ModelReport:
    final: metrics.EvalReport
    components: dict[str, metrics.EvalReport]
    uniform: metrics.EvalReport

    def summary(self) -> dict:
        out = {"ciou_at_half": self.final.ciou_at_half, "auc": self.final.auc,
               "mciou": self.final.mciou, "mean_ciou": self.final.mean_ciou,
               "uniform_ciou_at_half": self.uniform.ciou_at_half, "uniform_auc": self.uniform.auc}
        for name, rep in self.components.items():
            out[f"{name}_ciou_at_half"] = rep.ciou_at_half
            out[f"{name}_auc"] = rep.auc
        return out


def predict_maps(model: LocalizationModel, images, spectrograms, weights: FinalMapWeights | None = None,
                 chunk: int = 50, names=MAP_NAMES) -> dict[str, np.ndarray]:
    """Every localization map bilinearly resized to image resolution (not yet normalized)."""
    images = np.asarray(images, dtype=np.float64)
    h, w = images.shape[1:3]
    out = {k: [] for k in names}
    for s in range(0, len(images), chunk):
        res = model.forward(images[s:s + chunk], spectrograms[s:s + chunk], weights)
        for k in names:
            out[k].append(resize_map(getattr(res, k), h, w).data)
    return {k: np.concatenate(v) for k, v in out.items()}


def uniform_baseline(consensus_maps, act_thresh: float = 0.5) -> metrics.EvalReport:
    return metrics.evaluate([np.ones_like(g) for g in consensus_maps], consensus_maps, act_thresh)


def evaluate_model(model: LocalizationModel, data: SceneSet, weights: FinalMapWeights | None = None,
                   act_thresh: float = 0.5) -> ModelReport:
    if data.images.shape[1:] != (model.cfg.image_size, model.cfg.image_size, 3):
        raise ValueError(f"dataset images {data.images.shape[1:]} do not match a model built for "
                         f"{model.cfg.image_size}px")
    if data.spectrograms.shape[1:] != (model.cfg.spec_size, model.cfg.spec_size, 1):
        raise ValueError(f"dataset spectrograms {data.spectrograms.shape[1:]} do not match spec_size "
                         f"{model.cfg.spec_size}")
    maps = predict_maps(model, data.images, data.spectrograms, weights, names=COMPONENTS + ("map_final",))
    gts = [metrics.mask_consensus(m) for m in data.masks]

    def score(stack):
        return metrics.evaluate([metrics.normalize_prediction(p) for p in stack], gts, act_thresh)

    return ModelReport(
        final=score(maps["map_final"]),
        components={k: score(maps[k]) for k in COMPONENTS},
        uniform=uniform_baseline(gts, act_thresh),
    )
