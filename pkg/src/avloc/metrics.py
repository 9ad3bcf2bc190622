"""Consensus IoU, success-curve AUC and mean cIoU over a threshold sweep.

Boxes are ``(annotator, x0, y0, x1, y1)`` in pixels with exclusive upper
bounds, so a box covers ``[y0, y1) x [x0, x1)``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

# k / 20 keeps every threshold correctly rounded (0.6 stays 0.6)
AUC_THRESHOLDS = tuple(k / 20 for k in range(21))
MCIOU_THRESHOLDS = tuple(k / 20 for k in range(10, 20))


@dataclass
class EvalReport:
    ciou_at_half: float
    auc: float
    mciou: float
    mean_ciou: float
    per_sample: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def consensus_map(boxes, height: int, width: int) -> np.ndarray:
    """Per-pixel fraction of annotators whose boxes cover the pixel."""
    boxes = list(boxes)
    if not boxes:
        raise ValueError("consensus_map needs at least one box")
    per_annotator: dict = {}
    for annotator, x0, y0, x1, y1 in boxes:
        if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
            raise ValueError(f"box {(x0, y0, x1, y1)} outside a {width}x{height} image")
        cover = per_annotator.setdefault(annotator, np.zeros((height, width), dtype=bool))
        cover[y0:y1, x0:x1] = True
    total = sum(c.astype(np.int64) for c in per_annotator.values())
    return total / len(per_annotator)


def mask_consensus(mask) -> np.ndarray:
    """Single-annotator consensus map from a binary mask."""
    return np.asarray(mask, dtype=bool).astype(np.float64)


def normalize_prediction(pred) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all ones."""
    pred = np.asarray(pred, dtype=np.float64)
    lo, hi = pred.min(), pred.max()
    if hi - lo <= 0:
        return np.ones_like(pred)
    return (pred - lo) / (hi - lo)


def ciou(pred, consensus, act_thresh: float = 0.5) -> float:
    """Consensus IoU of the prediction activated at ``act_thresh * max(pred)``."""
    pred = np.asarray(pred, dtype=np.float64)
    consensus = np.asarray(consensus, dtype=np.float64)
    if pred.shape != consensus.shape:
        raise ValueError(f"prediction shape {pred.shape} != annotation shape {consensus.shape}")
    if not 0 < act_thresh < 1:
        raise ValueError("act_thresh must lie in (0, 1)")
    peak = pred.max()
    if peak <= 0:
        log.warning("ciou: prediction has no positive value; scoring 0")
        return 0.0
    active = pred >= act_thresh * peak
    # fsum is correctly rounded, so the score does not depend on summation order
    inter = math.fsum(consensus[active])
    false_pos = int(np.count_nonzero(active & (consensus == 0)))
    denom = math.fsum(consensus.ravel()) + false_pos
    return float(inter / denom) if denom > 0 else 0.0


def success_ratio(values, threshold: float) -> float:
    values = np.asarray(values, dtype=np.float64)
    return float(np.count_nonzero(values >= threshold)) / values.size


def success_auc(values) -> float:
    """Trapezoidal area under the success-ratio curve on t = 0, 0.05, ..., 1."""
    values = list(values)
    if not values:
        raise ValueError("success_auc needs at least one sample")
    ratios = [success_ratio(values, t) for t in AUC_THRESHOLDS]
    return float(np.trapezoid(ratios, AUC_THRESHOLDS))


def mciou_from_values(values) -> float:
    values = list(values)
    if not values:
        raise ValueError("mciou needs at least one sample")
    return float(np.mean([success_ratio(values, t) for t in MCIOU_THRESHOLDS]))


def mciou(preds, consensus_maps, act_thresh: float = 0.5) -> float:
    preds, consensus_maps = list(preds), list(consensus_maps)
    if not preds or len(preds) != len(consensus_maps):
        raise ValueError("mciou needs aligned, non-empty prediction and annotation sets")
    return mciou_from_values(ciou(p, g, act_thresh) for p, g in zip(preds, consensus_maps))


def evaluate(preds, consensus_maps, act_thresh: float = 0.5) -> EvalReport:
    preds, consensus_maps = list(preds), list(consensus_maps)
    if not preds or len(preds) != len(consensus_maps):
        raise ValueError("evaluate needs aligned, non-empty prediction and annotation sets")
    values = [ciou(p, g, act_thresh) for p, g in zip(preds, consensus_maps)]
    return EvalReport(
        ciou_at_half=success_ratio(values, 0.5),
        auc=success_auc(values),
        mciou=mciou_from_values(values),
        mean_ciou=float(np.mean(values)),
        per_sample=values,
    )


def load_annotations(path) -> dict[str, dict]:
    """Read a JSON-lines annotation file.

    One record per line::

        {"image": "0007", "height": 64, "width": 64,
         "boxes": [{"annotator": 0, "box": [x0, y0, x1, y1]}, ...]}
    """
    records = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            boxes = [(b["annotator"], *b["box"]) for b in rec["boxes"]]
            records[str(rec["image"])] = {"height": rec["height"], "width": rec["width"], "boxes": boxes}
    return records


def write_report(report: EvalReport, path, extra: dict | None = None) -> None:
    """Write ``<path>`` as JSON key-values and ``<path stem>.per_sample.csv``."""
    path = Path(path)
    payload = {k: v for k, v in report.to_dict().items() if k != "per_sample"}
    if extra:
        payload.update(extra)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    rows = ["index,ciou"] + [f"{i},{v!r}" for i, v in enumerate(report.per_sample)]
    path.with_name(path.stem + ".per_sample.csv").write_text("\n".join(rows) + "\n")
