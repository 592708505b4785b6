"""Segmentation-degradation metrics and the mask-matching protocol.

Ground truth is the victim's segmentation of the clean image; each clean
mask is re-queried on the adversarial image with a point prompt at its
centroid, and the overlap is scored. Success rates count masks whose IoU
falls at or below a threshold, pooled across all masks of a batch.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .victim import PointPrompt


@dataclass
class EvalRecord:
    per_mask_iou: list = field(default_factory=list)
    n_masks: int = 0
    miou: float = float("nan")
    miou_std: float = float("nan")
    asr50: float = float("nan")
    asr10: float = float("nan")

    def to_json_dict(self):
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v

        return {
            "miou": clean(self.miou),
            "miou_std": clean(self.miou_std),
            "asr50": clean(self.asr50),
            "asr10": clean(self.asr10),
            "n_masks": self.n_masks,
            "per_mask_iou": list(self.per_mask_iou),
        }


def iou(p, g):
    """|p & g| / |p | g|; two empty masks agree vacuously (1.0)."""
    p = np.asarray(p, dtype=bool)
    g = np.asarray(g, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(p & g)) / union


def miou(ious):
    """Mean and population standard deviation (divisor N) of an IoU list."""
    if len(ious) == 0:
        raise ValueError("miou of an empty list")
    arr = np.asarray(ious, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def asr_at(ious, threshold):
    """Fraction of IoUs at or below the threshold (inclusive)."""
    if len(ious) == 0:
        raise ValueError("asr_at of an empty list")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    arr = np.asarray(ious, dtype=np.float64)
    return float((arr <= threshold).mean())


def record_from_ious(ious):
    if len(ious) == 0:
        return EvalRecord()
    mean, std = miou(ious)
    return EvalRecord(
        per_mask_iou=[float(v) for v in ious],
        n_masks=len(ious),
        miou=mean,
        miou_std=std,
        asr50=asr_at(ious, 0.50),
        asr10=asr_at(ious, 0.10),
    )


def pool_records(records):
    """Pool per-mask IoUs across a batch (not a mean of per-image means)."""
    ious = []
    for rec in records:
        ious.extend(rec.per_mask_iou)
    return record_from_ious(ious)


def mask_centroid_prompt(mask):
    """Centroid of a mask as a point prompt; snaps to the nearest in-mask
    pixel (Euclidean, scan order breaking ties) when it falls outside."""
    ys, xs = np.nonzero(np.asarray(mask, dtype=bool))
    if ys.size == 0:
        raise ValueError("centroid of an empty mask")
    cy = float(ys.mean())
    cx = float(xs.mean())
    ry = min(int(math.floor(cy + 0.5)), mask.shape[0] - 1)
    rx = min(int(math.floor(cx + 0.5)), mask.shape[1] - 1)
    if not mask[ry, rx]:
        d2 = (ys.astype(np.float64) - cy) ** 2 + (xs.astype(np.float64) - cx) ** 2
        k = int(np.argmin(d2))  # nonzero() is scan order, argmin keeps the first
        ry, rx = int(ys[k]), int(xs[k])
    return PointPrompt(x=rx, y=ry)


def evaluate_attack(victim, clean, adversarial, min_area=None):
    """Score an adversarial image against the clean segmentation.

    The adversarial input should already be quantized when the comparison
    must match saved 8-bit files.
    """
    clean = np.asarray(clean, dtype=np.float32)
    adversarial = np.asarray(adversarial, dtype=np.float32)
    if clean.shape != adversarial.shape:
        raise ValueError(f"image shapes differ: {clean.shape} vs {adversarial.shape}")
    if min_area is None:
        ground_truth = victim.segment_everything(clean)
    else:
        ground_truth = victim.segment_everything(clean, min_area=min_area)
    if not ground_truth:
        return EvalRecord()  # nothing to evaluate against
    ious = []
    for g_mask in ground_truth:
        prompt = mask_centroid_prompt(g_mask)
        p_mask = victim.segment_point(adversarial, prompt)
        ious.append(iou(p_mask, g_mask))
    return record_from_ious(ious)
