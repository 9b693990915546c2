"""Face-detection recall, precision and F-measure."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from ..imagecore import Rect


@dataclass(frozen=True)
class DetectionCounts:
    tp: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError("detection counts must be non-negative")

    def __add__(self, other: "DetectionCounts") -> "DetectionCounts":
        return DetectionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def f_measure(recall: float, precision: float) -> float:
    if recall + precision <= 0:
        raise ValueError("F-measure undefined when recall and precision are both zero")
    return 2 * precision * recall / (precision + recall)


def detection_metrics(c: DetectionCounts) -> tuple[float, float, float]:
    """Recall, precision and F-measure, all in percent."""
    if c.tp + c.fn == 0:
        raise ValueError("recall undefined: no ground-truth faces (TP + FN = 0)")
    if c.tp + c.fp == 0:
        raise ValueError("precision undefined: no detections (TP + FP = 0)")
    recall = 100.0 * c.tp / (c.tp + c.fn)
    precision = 100.0 * c.tp / (c.tp + c.fp)
    return recall, precision, f_measure(recall, precision) if c.tp else 0.0


def match_detections(detected: Sequence[Rect], truth: Sequence[Rect],
                     iou_threshold: float = 0.5) -> DetectionCounts:
    """Greedy one-to-one matching by descending IoU."""
    pairs = sorted(((d.iou(t), i, j) for i, d in enumerate(detected) for j, t in enumerate(truth)),
                   key=lambda p: (-p[0], p[1], p[2]))
    used_d, used_t = set(), set()
    for iou, i, j in pairs:
        if iou < iou_threshold:
            break
        if i in used_d or j in used_t:
            continue
        used_d.add(i)
        used_t.add(j)
    tp = len(used_d)
    return DetectionCounts(tp, len(detected) - tp, len(truth) - tp)
