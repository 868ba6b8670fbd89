"""Segmentation quality metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import NUM_CLASSES


@dataclass
class IouReport:
    """Per-class intersection-over-union, pooled over all evaluated pixels.

    A class absent from both prediction and label (union 0) is reported as
    None, never as 0 or 1.
    """
    per_class: dict[int, Optional[float]]
    intersections: dict[int, int] = field(default_factory=dict)
    unions: dict[int, int] = field(default_factory=dict)
    step: Optional[int] = None
    run_id: str = ""

    def get(self, cls: int) -> Optional[float]:
        return self.per_class.get(cls)

    def mean_present(self) -> Optional[float]:
        vals = [v for v in self.per_class.values() if v is not None]
        return float(np.mean(vals)) if vals else None


def iou(pred: np.ndarray, label: np.ndarray, num_classes: int = NUM_CLASSES,
        step: Optional[int] = None, run_id: str = "") -> IouReport:
    """Pooled-pixel IOU per class over the whole evaluated set."""
    pred = np.asarray(pred)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise ValueError(f"prediction {pred.shape} vs label {label.shape}")
    per: dict[int, Optional[float]] = {}
    inters: dict[int, int] = {}
    unions: dict[int, int] = {}
    for c in range(num_classes):
        p = pred == c
        l = label == c
        inter = int((p & l).sum())
        union = int((p | l).sum())
        inters[c], unions[c] = inter, union
        per[c] = inter / union if union > 0 else None
    return IouReport(per, inters, unions, step=step, run_id=run_id)
