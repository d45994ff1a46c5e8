"""Pixel IoU, object-level probability of detection and false-alarm rate."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
MATCH_RULES = ("centroid", "overlap")


@dataclass
class Component:
    label: int
    pixels: np.ndarray  # (k, 2) row, col
    centroid: tuple
    area: int


def connected_components(mask) -> List[Component]:
    """8-connected components in raster order of their first pixel."""
    mask = np.asarray(mask).astype(bool)
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    comps = []
    for lab in range(1, n + 1):
        pix = np.argwhere(labels == lab)
        comps.append(Component(lab, pix, tuple(pix.mean(0)), len(pix)))
    return comps


@dataclass
class ImageCounts:
    intersection: int
    union: int
    n_targets: int
    n_detected: int
    false_pixels: int
    pixels: int


@dataclass
class DetectionReport:
    iou: float
    pd: Optional[float]
    fa: float
    n_pred_correct: int
    n_all_targets: int
    p_false: int
    p_all: int
    intersection: int
    union: int
    match_rule: str = "centroid"
    match_distance: float = 3.0
    iou_mode: str = "dataset"
    per_image: List[ImageCounts] = field(default_factory=list)

    def to_dict(self, per_image=False):
        d = asdict(self)
        if not per_image:
            d.pop("per_image")
        return d


def _matches(rule, pred: Component, gt: Component, distance: float) -> bool:
    if rule == "centroid":
        return math.dist(pred.centroid, gt.centroid) <= distance
    gt_set = {tuple(p) for p in gt.pixels}
    return any(tuple(p) in gt_set for p in pred.pixels)


def image_counts(pred, gt, match_rule="centroid", distance=3.0) -> ImageCounts:
    """Per-image counts.

    Each GT component is matched greedily (GT in raster order) to the first
    unmatched predicted component satisfying the rule. Pixels of predicted
    components left unmatched are false alarms.
    """
    if match_rule not in MATCH_RULES:
        raise ValueError(f"match_rule must be one of {MATCH_RULES}")
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} sizes differ")
    pcs = connected_components(pred)
    gcs = connected_components(gt)
    used = [False] * len(pcs)
    detected = 0
    for g in gcs:
        for k, p in enumerate(pcs):
            if not used[k] and _matches(match_rule, p, g, distance):
                used[k] = True
                detected += 1
                break
    false_pixels = sum(p.area for k, p in enumerate(pcs) if not used[k])
    return ImageCounts(
        intersection=int((pred & gt).sum()),
        union=int((pred | gt).sum()),
        n_targets=len(gcs),
        n_detected=detected,
        false_pixels=int(false_pixels),
        pixels=int(pred.size),
    )


def evaluate(pred_masks: Sequence, gt_masks: Sequence, match_rule: str = "centroid",
             distance: float = 3.0, iou_mode: str = "dataset") -> DetectionReport:
    """Dataset-level IoU / Pd / Fa.

    ``iou_mode="dataset"`` divides summed intersections by summed unions;
    ``"mean"`` averages per-image IoU (images with an empty union count as 1).
    """
    if len(pred_masks) != len(gt_masks):
        raise ValueError(f"{len(pred_masks)} predictions for {len(gt_masks)} ground-truth masks")
    if iou_mode not in ("dataset", "mean"):
        raise ValueError("iou_mode must be 'dataset' or 'mean'")
    counts = [image_counts(p, g, match_rule, distance) for p, g in zip(pred_masks, gt_masks)]
    inter = sum(c.intersection for c in counts)
    union = sum(c.union for c in counts)
    if iou_mode == "dataset":
        iou = inter / union if union else 1.0
    else:
        iou = float(np.mean([c.intersection / c.union if c.union else 1.0 for c in counts])) if counts else 1.0
    n_all = sum(c.n_targets for c in counts)
    n_hit = sum(c.n_detected for c in counts)
    p_false = sum(c.false_pixels for c in counts)
    p_all = sum(c.pixels for c in counts)
    return DetectionReport(
        iou=iou,
        pd=n_hit / n_all if n_all else None,
        fa=p_false / p_all if p_all else 0.0,
        n_pred_correct=n_hit,
        n_all_targets=n_all,
        p_false=p_false,
        p_all=p_all,
        intersection=inter,
        union=union,
        match_rule=match_rule,
        match_distance=distance,
        iou_mode=iou_mode,
        per_image=counts,
    )


def format_metric(value: Optional[float], scale: float) -> str:
    """Scaled, two decimals, trailing zeros dropped: 0.9704 -> '97.04', 1.0 -> '100'."""
    if value is None:
        return "n/a"
    text = f"{value * scale:.2f}"
    return text.rstrip("0").rstrip(".") if "." in text else text


def render_report(report: DetectionReport, name: str = "") -> dict:
    """Table text (IoU and Pd in 1e-2, Fa in 1e-6) and a JSON document."""
    iou = format_metric(report.iou, 1e2)
    pd = format_metric(report.pd, 1e2)
    fa = format_metric(report.fa, 1e6)
    header = f"{'dataset':<12}{'IoU(1e-2)':>12}{'Pd(1e-2)':>12}{'Fa(1e-6)':>12}"
    row = f"{(name or '-'):<12}{iou:>12}{pd:>12}{fa:>12}"
    doc = report.to_dict()
    doc["formatted"] = {"iou": iou, "pd": pd, "fa": fa}
    return {"text": f"{header}\n{row}\nmatch rule: {report.match_rule}", "json": json.dumps(doc, indent=2),
            "iou": iou, "pd": pd, "fa": fa}


def per_image_csv(report: DetectionReport, ids: Optional[Sequence[str]] = None) -> str:
    lines = ["id,intersection,union,n_targets,n_detected,false_pixels,pixels"]
    for i, c in enumerate(report.per_image):
        ident = ids[i] if ids is not None else str(i)
        lines.append(
            f"{ident},{c.intersection},{c.union},{c.n_targets},{c.n_detected},{c.false_pixels},{c.pixels}"
        )
    return "\n".join(lines) + "\n"
