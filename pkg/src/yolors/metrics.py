"""Detection evaluation: IoU matching, P/R/F1, interpolated AP, mAP, confusion."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: tuple  # x1, y1, x2, y2 in pixels
    image_id: int | str = 0

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"degenerate detection box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class GroundTruth:
    class_id: int
    box: tuple
    image_id: int | str = 0


def iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    if not (ax2 > ax1 and ay2 > ay1 and bx2 > bx1 and by2 > by1):
        raise ValueError(f"degenerate box in iou({a}, {b})")
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    inter = iw * ih if iw > 0 and ih > 0 else 0.0
    return inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)


@dataclass
class MatchResult:
    det_tp: list  # bool per detection, in the caller's order
    det_match: list  # matched truth index or -1
    truth_matched: list

    @property
    def tp(self) -> int:
        return int(sum(self.det_tp))

    @property
    def fp(self) -> int:
        return len(self.det_tp) - self.tp

    @property
    def fn(self) -> int:
        return len(self.truth_matched) - int(sum(self.truth_matched))


def score_order(dets: Sequence[Detection]) -> list:
    """Indices by descending score; ties keep input order."""
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def match_detections(dets: Sequence[Detection], truths: Sequence[GroundTruth], iou_threshold: float = 0.5, class_aware: bool = True) -> MatchResult:
    """Greedy matching: each detection (best score first) takes the highest-IoU free truth."""
    det_tp = [False] * len(dets)
    det_match = [-1] * len(dets)
    matched = [False] * len(truths)
    by_image: dict = {}
    for j, t in enumerate(truths):
        by_image.setdefault(t.image_id, []).append(j)
    for i in score_order(dets):
        d = dets[i]
        best, best_iou = -1, iou_threshold
        for j in by_image.get(d.image_id, ()):
            t = truths[j]
            if matched[j] or (class_aware and t.class_id != d.class_id):
                continue
            v = iou(d.box, t.box)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            matched[best] = True
            det_tp[i] = True
            det_match[i] = best
    return MatchResult(det_tp, det_match, matched)


def precision_recall(m: MatchResult) -> tuple:
    """``(P, R, flags)``; an empty denominator gives 0 and a flag."""
    flags = []
    tp, fp, fn = m.tp, m.fp, m.fn
    if tp + fp == 0:
        p = 0.0
        flags.append("no_detections")
    else:
        p = tp / (fp + tp)
    if tp + fn == 0:
        r = 0.0
        flags.append("no_truths")
    else:
        r = tp / (fn + tp)
    return p, r, flags


def f1(p: float, r: float) -> float:
    """Harmonic mean of precision and recall (0 when both are 0)."""
    if p + r <= 0:
        return 0.0
    return 2.0 * p * r / (p + r)


def pr_curve(dets, truths, iou_threshold: float) -> tuple:
    m = match_detections(dets, truths, iou_threshold)
    order = score_order(dets)
    tp = np.array([m.det_tp[i] for i in order], dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / max(len(truths), 1)
    precision = ctp / np.maximum(ctp + cfp, 1e-300)
    return precision, recall


def average_precision(dets, truths, iou_threshold: float = 0.5) -> float:
    """101-point interpolated AP for one class (0 when there are no truths)."""
    if not truths or not dets:
        return 0.0
    precision, recall = pr_curve(dets, truths, iou_threshold)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def map_at(dets, truths, thresholds: Sequence[float] = COCO_THRESHOLDS) -> tuple:
    """``(map50, map50_95, per_class)`` where per_class maps class -> {threshold: AP}.

    Classes are those with at least one ground truth.
    """
    thresholds = [float(t) for t in thresholds]
    for t in thresholds:
        if not 0.5 - 1e-9 <= t <= 0.95 + 1e-9:
            raise ValueError(f"IoU threshold {t} outside [0.5, 0.95]")
    all_t = sorted(set(thresholds) | {0.5})
    classes = sorted({t.class_id for t in truths})
    table = {}
    for c in classes:
        cd = [d for d in dets if d.class_id == c]
        ct = [t for t in truths if t.class_id == c]
        table[c] = {t: average_precision(cd, ct, t) for t in all_t}
    if not classes:
        return 0.0, 0.0, table
    map50 = float(np.mean([table[c][0.5] for c in classes]))
    map50_95 = float(np.mean([np.mean([table[c][t] for c in classes]) for t in thresholds]))
    return map50, map50_95, table


def confusion_matrix(dets, truths, num_classes: int, iou_threshold: float = 0.5, conf_threshold: float = 0.25) -> np.ndarray:
    """``(C+1) x (C+1)`` counts, rows = true class, columns = predicted; index C is background."""
    kept = [d for d in dets if d.score >= conf_threshold]
    m = match_detections(kept, truths, iou_threshold, class_aware=False)
    bg = num_classes
    cm = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
    for i, d in enumerate(kept):
        j = m.det_match[i]
        if j >= 0:
            cm[truths[j].class_id, d.class_id] += 1
        else:
            cm[bg, d.class_id] += 1
    for j, t in enumerate(truths):
        if not m.truth_matched[j]:
            cm[t.class_id, bg] += 1
    return cm


@dataclass
class EvalReport:
    precision: dict
    recall: dict
    f1: dict
    ap: dict
    map50: float
    map50_95: float
    confusion: list
    flops: int | None = None
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "ap": {str(c): {f"{t:.2f}": v for t, v in row.items()} for c, row in self.ap.items()},
            "map50": self.map50,
            "map50_95": self.map50_95,
            "confusion": self.confusion,
        }
        if self.flops is not None:
            d["flops"] = self.flops
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(dets, truths, num_classes: int, iou_threshold: float = 0.5, conf_threshold: float = 0.25) -> EvalReport:
    """Full report; P/R/F1 use detections scoring at least ``conf_threshold``."""
    kept = [d for d in dets if d.score >= conf_threshold]
    precision, recall, f1s, flags = {}, {}, {}, []
    for c in range(num_classes):
        m = match_detections([d for d in kept if d.class_id == c], [t for t in truths if t.class_id == c], iou_threshold)
        p, r, fl = precision_recall(m)
        precision[str(c)], recall[str(c)], f1s[str(c)] = p, r, f1(p, r)
        flags.extend(f"class {c}: {f}" for f in fl)
    m = match_detections(kept, truths, iou_threshold)
    p, r, _ = precision_recall(m)
    precision["micro"], recall["micro"], f1s["micro"] = p, r, f1(p, r)
    map50, map50_95, table = map_at(dets, truths)
    cm = confusion_matrix(dets, truths, num_classes, iou_threshold, conf_threshold)
    return EvalReport(precision, recall, f1s, table, map50, map50_95, cm.tolist(), flags=flags)
