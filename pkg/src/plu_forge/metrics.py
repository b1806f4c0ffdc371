"""
Instance-segmentation quality metrics: mask mAP, F1, Dice and AJI.

Matching for F1 and Dice is one-to-one and greedy by descending IoU. mAP
follows the COCO-style IoU sweep 0.50:0.95:0.05 with all-point
interpolated AP, single class.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .masks import MaskError, Scene, severe_overlap_flags

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class MetricReport:
    map: float
    f1: float
    dice: float
    aji: float
    ap_table: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "map": self.map,
            "f1": self.f1,
            "dice": self.dice,
            "aji": self.aji,
            "ap_table": {f"{t:.2f}": v for t, v in sorted(self.ap_table.items())},
        }


def _check(preds: Scene, gts: Scene) -> None:
    if (preds.width, preds.height) != (gts.width, gts.height):
        raise MaskError("prediction and ground-truth grids differ")


def overlap_tables(preds: Scene, gts: Scene) -> tuple[np.ndarray, np.ndarray]:
    """Intersection and union pixel counts, shape ``(n_pred, n_gt)``."""
    n_p, n_g = len(preds.instances), len(gts.instances)
    inter = np.zeros((n_p, n_g), dtype=np.int64)
    if n_p and n_g:
        P = np.stack([m.bitmap.ravel() for m in preds.instances]).astype(np.int64)
        G = np.stack([m.bitmap.ravel() for m in gts.instances]).astype(np.int64)
        inter = P @ G.T
    area_p = np.array([m.area for m in preds.instances], dtype=np.int64)
    area_g = np.array([m.area for m in gts.instances], dtype=np.int64)
    union = area_p[:, None] + area_g[None, :] - inter
    return inter, union


def _iou_matrix(inter: np.ndarray, union: np.ndarray) -> np.ndarray:
    return np.divide(inter, union, out=np.zeros(inter.shape), where=union > 0)


def greedy_match(iou: np.ndarray, thr: float) -> list[tuple[int, int]]:
    """One-to-one matching by descending IoU, keeping pairs with ``IoU >= thr``."""
    cand = [(-iou[i, j], i, j) for i, j in zip(*np.nonzero(iou >= thr)) if iou[i, j] > 0]
    cand.sort()
    used_p, used_g, pairs = set(), set(), []
    for _, i, j in cand:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((int(i), int(j)))
    return pairs


def dice(preds: Scene, gts: Scene, iou_thr: float = 0.5) -> float:
    """Mean per-pair Dice over matched pairs; unmatched instances count as 0."""
    _check(preds, gts)
    n_p, n_g = len(preds.instances), len(gts.instances)
    if n_p == 0 and n_g == 0:
        raise ValueError("dice is undefined for two empty scenes")
    if n_p == 0 or n_g == 0:
        return 0.0
    inter, union = overlap_tables(preds, gts)
    pairs = greedy_match(_iou_matrix(inter, union), iou_thr)
    total = 0.0
    for i, j in pairs:
        total += 2.0 * inter[i, j] / (preds.instances[i].area + gts.instances[j].area)
    return total / max(n_p, n_g)


def f1_at_iou(preds: Scene, gts: Scene, iou_thr: float = 0.5) -> float:
    _check(preds, gts)
    n_p, n_g = len(preds.instances), len(gts.instances)
    if n_p == 0 and n_g == 0:
        return 1.0
    tp = 0
    if n_p and n_g:
        inter, union = overlap_tables(preds, gts)
        tp = len(greedy_match(_iou_matrix(inter, union), iou_thr))
    fp, fn = n_p - tp, n_g - tp
    return 2.0 * tp / (2.0 * tp + fp + fn)


def average_precision(iou: np.ndarray, scores: Sequence[float], thr: float) -> float:
    """All-point interpolated AP for one IoU threshold.

    Predictions are taken in descending score order (stable); each claims the
    unmatched ground truth it overlaps most if that IoU reaches ``thr``.
    """
    n_p, n_g = iou.shape
    if n_g == 0:
        return 1.0 if n_p == 0 else 0.0
    if n_p == 0:
        return 0.0
    order = sorted(range(n_p), key=lambda i: -scores[i])
    taken = np.zeros(n_g, dtype=bool)
    tp = np.zeros(n_p)
    for rank, i in enumerate(order):
        row = np.where(taken, -1.0, iou[i])
        j = int(np.argmax(row))
        if row[j] >= thr and row[j] > 0:
            taken[j] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    recall = ctp / n_g
    precision = ctp / np.arange(1, n_p + 1)
    # precision envelope, then area under the step curve
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def map_masks(preds: Scene, gts: Scene, scores: Optional[Sequence[float]] = None,
              thresholds: Sequence[float] = COCO_THRESHOLDS) -> tuple[float, dict]:
    """Mean AP over ``thresholds``; returns ``(mAP, {threshold: AP})``.

    Scores default to ``preds.scores``, or 1.0 for every prediction.
    """
    _check(preds, gts)
    if scores is None:
        scores = preds.scores if preds.scores is not None else [1.0] * len(preds.instances)
    if len(scores) != len(preds.instances):
        raise ValueError("one score per prediction is required")
    inter, union = overlap_tables(preds, gts)
    iou = _iou_matrix(inter, union)
    table = {float(t): average_precision(iou, scores, t) for t in thresholds}
    return float(np.mean(list(table.values()))), table


def aji(preds: Scene, gts: Scene) -> float:
    """Aggregated Jaccard index with one-use predictions.

    Ground truths are visited in descending order of their best IoU; each
    takes the unused prediction it overlaps most.
    """
    _check(preds, gts)
    n_p, n_g = len(preds.instances), len(gts.instances)
    if n_p == 0 and n_g == 0:
        return 1.0
    inter, union = overlap_tables(preds, gts)
    iou = _iou_matrix(inter, union)
    best = iou.max(axis=0) if n_p else np.zeros(n_g)
    used = np.zeros(n_p, dtype=bool)
    c_sum = 0
    u_sum = 0
    for j in sorted(range(n_g), key=lambda k: -best[k]):
        col = np.where(used, -1.0, iou[:, j]) if n_p else np.array([])
        if col.size and col.max() > 0:
            i = int(np.argmax(col))
            used[i] = True
            c_sum += inter[i, j]
            u_sum += union[i, j]
        else:
            u_sum += gts.instances[j].area
    u_sum += sum(preds.instances[i].area for i in range(n_p) if not used[i])
    return c_sum / u_sum


def evaluate(preds: Scene, gts: Scene, scores: Optional[Sequence[float]] = None,
             iou_thr: float = 0.5) -> MetricReport:
    m, table = map_masks(preds, gts, scores)
    if not preds.instances and not gts.instances:
        d = 1.0
    else:
        d = dice(preds, gts, iou_thr)
    return MetricReport(m, f1_at_iou(preds, gts, iou_thr), d, aji(preds, gts), table)


def evaluate_corpus(pairs: Sequence[tuple[Scene, Scene]], iou_thr: float = 0.5) -> MetricReport:
    """Average per-image reports over a dataset."""
    reports = [evaluate(p, g, iou_thr=iou_thr) for p, g in pairs]
    if not reports:
        raise ValueError("no images to evaluate")
    keys = reports[0].ap_table.keys()
    mean = lambda xs: float(np.mean(xs))
    return MetricReport(
        mean([r.map for r in reports]),
        mean([r.f1 for r in reports]),
        mean([r.dice for r in reports]),
        mean([r.aji for r in reports]),
        {k: mean([r.ap_table[k] for r in reports]) for k in keys},
    )


def severe_subset(preds: Scene, gts: Scene, threshold: float = 1 / 3) -> tuple[Scene, Scene]:
    """Restrict ``gts`` to severely-overlapping instances.

    Predictions are kept when the ground truth they overlap most is in the
    subset; predictions touching no ground truth are dropped.
    """
    flags = gts.severe_overlap_flags
    if flags is None:
        flags = severe_overlap_flags(gts, threshold)
    keep_g = [j for j, f in enumerate(flags) if f]
    inter, _ = overlap_tables(preds, gts)
    keep_p = []
    for i in range(len(preds.instances)):
        if inter.shape[1] and inter[i].max() > 0 and flags[int(np.argmax(inter[i]))]:
            keep_p.append(i)
    return preds.subset(keep_p), gts.subset(keep_g)


def delta_pm(before: MetricReport, after: MetricReport) -> float:
    return sum(getattr(after, k) - getattr(before, k) for k in ("map", "f1", "dice", "aji"))
