"""
Scalar loss evaluation for the supervised and semi-supervised objectives.

Every log argument is clamped to ``[EPS, 1 - EPS]`` (``[EPS, 1]`` for the
focal loss). Nothing here computes gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .masks import InstanceMask, MaskError
from .matching import hungarian_match

EPS = 1e-7


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"focal alpha must be in (0, 1), got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"focal gamma must be >= 0, got {self.gamma}")


@dataclass(frozen=True)
class LossWeights:
    """Trade-offs for the auxiliary PLU losses and the pseudo/synthetic streams.

    The three base losses are always weighted 1.0.
    """

    alpha_ocls: float = 1.0
    beta_count: float = 1.0
    gamma_iou: float = 1.0
    lambda_ssl: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")


@dataclass(frozen=True)
class LossComponents:
    cls: float = 0.0
    reg: float = 0.0
    seg: float = 0.0
    o_cls: float = 0.0
    i_count: float = 0.0
    i_iou: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def mean(cls, items: Sequence["LossComponents"]) -> "LossComponents":
        if not items:
            return cls()
        n = len(items)
        return cls(**{f.name: sum(getattr(it, f.name) for it in items) / n for f in fields(cls)})


def focal_loss(p_t: float, params: FocalParams = FocalParams()) -> float:
    p = min(max(float(p_t), EPS), 1.0)
    return -params.alpha * (1.0 - p) ** params.gamma * math.log(p)


def smooth_l1(t: Sequence[float], v: Sequence[float]) -> float:
    """Smooth-L1 summed over the four box offsets (x, y, w, h)."""
    if len(t) != 4 or len(v) != 4:
        raise ValueError("smooth_l1 expects two 4-vectors")
    total = 0.0
    for ti, vi in zip(t, v):
        d = abs(float(ti) - float(vi))
        total += 0.5 * d * d if d < 1.0 else d - 0.5
    return total


def _clamp(p) -> np.ndarray:
    return np.clip(np.asarray(p, dtype=float), EPS, 1.0 - EPS)


def seg_cross_entropy(target, probs) -> float:
    """Mean per-pixel two-class cross-entropy; ``probs`` is P(foreground)."""
    if isinstance(target, InstanceMask):
        target = target.bitmap
    y = np.asarray(target, dtype=bool)
    p = _clamp(probs)
    if y.shape != p.shape:
        raise MaskError(f"target shape {y.shape} != probability shape {p.shape}")
    ll = np.where(y, np.log(p), np.log1p(-p))
    return float(-ll.mean())


def binary_cross_entropy(y: Sequence[float], p: Sequence[float]) -> float:
    y = np.asarray(y, dtype=float)
    p = _clamp(p)
    if y.shape != p.shape or y.ndim != 1 or y.size == 0:
        raise ValueError(f"length mismatch or empty input: {y.shape} vs {p.shape}")
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def count_bce(k: int, existence_probs: Sequence[float], printed_form: bool = False) -> float:
    """Instance-count loss over ``K = len(existence_probs)`` slots.

    By default each slot is a BCE term against the existence target
    ``[1]*k + [0]*(K-k)``. ``printed_form=True`` evaluates the literal
    ``-(1/K) sum[k log e_i + (K-k) log(1-e_i)]`` instead.
    """
    K = len(existence_probs)
    if not 0 <= k <= K:
        raise ValueError(f"true count {k} outside [0, {K}]")
    if printed_form:
        e = _clamp(existence_probs)
        return float(-np.mean(k * np.log(e) + (K - k) * np.log1p(-e)))
    return binary_cross_entropy([1.0] * k + [0.0] * (K - k), existence_probs)


def _bitmap(m) -> np.ndarray:
    return m.bitmap if isinstance(m, InstanceMask) else np.asarray(m, dtype=bool)


def _iou_bitmaps(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def decomposition_iou_loss(pred_masks: Sequence, gt_masks: Sequence) -> float:
    """Mean ``1 - IoU`` over Hungarian-matched pairs, normalised by ``len(gt_masks)``.

    Ground-truth masks left unmatched (fewer predictions than targets)
    contribute the maximal penalty 1; surplus predictions are ignored.
    """
    if len(pred_masks) == 0 or len(gt_masks) == 0:
        raise ValueError("decomposition_iou_loss needs non-empty mask sets")
    preds = [_bitmap(m) for m in pred_masks]
    gts = [_bitmap(m) for m in gt_masks]
    shape = gts[0].shape
    if any(b.shape != shape for b in preds + gts):
        raise MaskError("mask grids differ")
    cost = np.array([[1.0 - _iou_bitmaps(p, g) for g in gts] for p in preds])
    match = hungarian_match(cost)
    unmatched = len(gts) - len(match.pairs)
    return (match.total_cost + unmatched) / len(gts)


def total_sl_loss(c: LossComponents, w: LossWeights = LossWeights()) -> float:
    return (c.cls + c.reg + c.seg
            + w.alpha_ocls * c.o_cls + w.beta_count * c.i_count + w.gamma_iou * c.i_iou)


def total_sassl_loss(l_real: float, l_pseudo: float, l_synthetic: float,
                     w: LossWeights = LossWeights()) -> float:
    return l_real + w.lambda_ssl * (l_pseudo + l_synthetic)
