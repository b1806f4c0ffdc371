"""
Synthetic overlapping-organoid scenes and ground-truth-driven test backends.

Scenes are rotated ellipses composited darker-wins over a bright
background, which mimics absorption in brightfield images. The oracle
segmentor reproduces the merged-overlap failure mode on demand; the
reference student evaluates the loss library on a fixed thresholding model.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .augment import WeakParams, weak_scene
from .losses import (EPS, LossComponents, binary_cross_entropy, count_bce,
                     decomposition_iou_loss, focal_loss, seg_cross_entropy,
                     smooth_l1)
from .masks import (InstanceMask, Scene, bbox_of, mask_iou, merge_masks,
                    overlap_clusters, severe_overlap_flags)
from .pseudo_labels import (MAX_INSTANCES, ProbabilityMaskSet, Proposal,
                            assign_judgment_label, build_decomposition_target,
                            build_judgment_training_set, order_components)
from .synthesis import ProceduralGenerator
from .weights import WeightVector

logger = logging.getLogger(__name__)


def key_seed(key: str) -> int:
    """Stable 32-bit integer for a string key."""
    return zlib.crc32(key.encode("utf-8"))


@dataclass(frozen=True)
class SimConfig:
    width: int = 96
    height: int = 96
    n_instances: tuple[int, int] = (4, 8)
    axes: tuple[float, float] = (6.0, 14.0)
    overlap_bias: float = 0.7
    transparency_levels: tuple[float, float] = (90.0, 150.0)
    focus_levels: tuple[float, float] = (2.0, 0.0)  # blur sigma for low / high focus
    background_gray: float = 215.0
    noise_sigma: float = 3.0
    max_cluster_size: int = MAX_INSTANCES
    min_exclusive_fraction: float = 0.25
    max_attempts: int = 100
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.n_instances
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid n_instances range {self.n_instances}")
        if self.axes[0] < 2 or self.axes[1] < self.axes[0]:
            raise ValueError(f"axes must be >= 2 px and ordered, got {self.axes}")
        if 2 * self.axes[1] + 2 > min(self.width, self.height):
            raise ValueError("largest ellipse does not fit in the image")
        if not 0.0 <= self.overlap_bias <= 1.0:
            raise ValueError("overlap_bias must be in [0, 1]")
        if self.max_cluster_size < 1:
            raise ValueError("max_cluster_size must be >= 1")


@dataclass(frozen=True)
class SimulatedScene:
    image: np.ndarray
    scene: Scene
    levels: tuple[float, ...]  # assigned gray level per instance
    blurs: tuple[float, ...]  # assigned blur sigma per instance
    skipped: int = 0


def ellipse_bitmap(shape: tuple[int, int], cy: float, cx: float, a: float, b: float, phi: float) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(phi) + dy * math.sin(phi)
    v = -dx * math.sin(phi) + dy * math.cos(phi)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _placement_ok(new: np.ndarray, existing: list[np.ndarray], cfg: SimConfig, disjoint: bool) -> bool:
    if not new.any():
        return False
    touching = [i for i, m in enumerate(existing) if np.any(m & new)]
    if disjoint and touching:
        return False
    if not disjoint and not touching:
        return False
    masks = existing + [new]
    count = np.zeros(new.shape, dtype=np.int32)
    for m in masks:
        count += m
    # every instance keeps enough exclusive area, so no mask is covered by others
    for m in [existing[i] for i in touching] + [new]:
        if np.count_nonzero(m & (count == 1)) < cfg.min_exclusive_fraction * np.count_nonzero(m):
            return False
    inst = [InstanceMask.from_bitmap(m, i + 1) for i, m in enumerate(masks)]
    return max(len(c) for c in overlap_clusters(inst)) <= cfg.max_cluster_size


def generate_scene(cfg: SimConfig, seed: Optional[int] = None, image_path: Optional[str] = None) -> SimulatedScene:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    shape = (cfg.height, cfg.width)
    n = int(rng.integers(cfg.n_instances[0], cfg.n_instances[1] + 1))
    bitmaps: list[np.ndarray] = []
    radii: list[float] = []
    centers: list[tuple[float, float]] = []
    categories: list[int] = []
    skipped = 0
    for k in range(n):
        a, b = rng.uniform(*cfg.axes, size=2)
        phi = rng.uniform(0.0, math.pi)
        cat = int(rng.integers(1, 5))
        margin = max(a, b) + 1.0
        placed = None
        for _ in range(cfg.max_attempts):
            near = bool(bitmaps) and rng.random() < cfg.overlap_bias
            if near:
                j = int(rng.integers(len(bitmaps)))
                dist = rng.uniform(0.4, 1.0) * (radii[j] + (a + b) / 2.0)
                theta = rng.uniform(0.0, 2 * math.pi)
                cy = centers[j][0] + dist * math.sin(theta)
                cx = centers[j][1] + dist * math.cos(theta)
                if not (margin <= cy <= cfg.height - 1 - margin and margin <= cx <= cfg.width - 1 - margin):
                    continue
            else:
                cy = rng.uniform(margin, cfg.height - 1 - margin)
                cx = rng.uniform(margin, cfg.width - 1 - margin)
            bm = ellipse_bitmap(shape, cy, cx, a, b, phi)
            if _placement_ok(bm, bitmaps, cfg, disjoint=not near):
                placed = (bm, cy, cx)
                break
        if placed is None:
            logger.info("instance %d not placed after %d attempts", k, cfg.max_attempts)
            skipped += 1
            continue
        bitmaps.append(placed[0])
        centers.append((placed[1], placed[2]))
        radii.append((a + b) / 2.0)
        categories.append(cat)

    levels = tuple(cfg.transparency_levels[int(c in (2, 4))] for c in categories)
    blurs = tuple(cfg.focus_levels[int(c in (3, 4))] for c in categories)
    image = np.full(shape, cfg.background_gray, dtype=float)
    for bm, level, blur in zip(bitmaps, levels, blurs):
        layer = np.where(bm, level, cfg.background_gray)
        if blur > 0:
            layer = ndimage.gaussian_filter(layer, blur, mode="nearest")
        np.minimum(image, layer, out=image)
    if cfg.noise_sigma > 0:
        image += rng.normal(0.0, cfg.noise_sigma, shape)
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)

    masks = tuple(InstanceMask.from_bitmap(bm, i + 1) for i, bm in enumerate(bitmaps))
    scene = Scene(image_path, cfg.width, cfg.height, masks, categories=tuple(categories))
    scene = scene.replace(severe_overlap_flags=tuple(severe_overlap_flags(scene)))
    return SimulatedScene(image, scene, levels, blurs, skipped)


def severe_clusters(scene: Scene) -> list[list[int]]:
    """Overlap clusters (>= 2 members) containing a severely-overlapping instance."""
    flags = severe_overlap_flags(scene)
    return [c for c in overlap_clusters(scene.instances)
            if len(c) >= 2 and any(flags[i] for i in c)]


# -- oracle teacher ----------------------------------------------------------

@dataclass(frozen=True)
class OracleContext:
    gt: tuple[InstanceMask, ...]
    merged: tuple[InstanceMask, ...]
    components: tuple[tuple[InstanceMask, ...], ...]
    n_merged_emitted: int = 0


def _jitter(bm: np.ndarray, k: int) -> np.ndarray:
    if k == 0:
        return bm
    op = ndimage.binary_dilation if k > 0 else ndimage.binary_erosion
    out = op(bm, structure=ndimage.generate_binary_structure(2, 1), iterations=abs(k))
    return out if out.any() else bm


class OracleSegmentor:
    """Ground-truth segmentor with controllable merge corruption.

    ``predict`` emits the ground-truth masks of the requested view; each
    severely-overlapping cluster is emitted merged with probability ``q``.
    ``judge`` and ``decompose`` answer from the same ground truth.
    """

    def __init__(self, registry: dict, q: float = 0.0, jitter: int = 0, seed: int = 0,
                 K: int = MAX_INSTANCES, weights: Optional[WeightVector] = None):
        if not 0.0 <= q <= 1.0:
            raise ValueError("merge probability q must be in [0, 1]")
        self.registry = registry
        self.q = q
        self.jitter = int(jitter)
        self.seed = seed
        self.K = K
        self._weights = weights if weights is not None else WeightVector(np.zeros(8), "reference/v1")
        self.merge_log: list[int] = []

    def view(self, key: str, params: Optional[WeakParams] = None) -> Scene:
        if key not in self.registry:
            raise KeyError(f"scene {key!r} not in oracle registry")
        gt = self.registry[key]
        return weak_scene(gt, params) if params is not None else gt

    def context_for(self, scene: Scene, n_merged: int = 0) -> OracleContext:
        errs = [s for s in build_judgment_training_set(scene) if s.label == 0]
        return OracleContext(scene.instances, tuple(s.mask for s in errs),
                             tuple(s.component_masks for s in errs), n_merged)

    def predict(self, image, key: str, view: Optional[WeakParams] = None, token: int = 0):
        gt = self.view(key, view)
        rng = np.random.default_rng([self.seed, key_seed(key), token])
        emitted: list[np.ndarray] = []
        merged_members: set[int] = set()
        n_merged = 0
        for cluster in severe_clusters(gt):
            if rng.random() < self.q:
                merged_members.update(cluster)
                emitted.append(merge_masks([gt.instances[i] for i in cluster]).bitmap)
                n_merged += 1
        singles = [gt.instances[i].bitmap for i in range(len(gt.instances)) if i not in merged_members]
        proposals = []
        for bm in singles + emitted:
            if self.jitter:
                bm = _jitter(bm, int(rng.integers(-self.jitter, self.jitter + 1)))
            grid = np.where(bm, 1.0 - EPS, EPS)
            box = bbox_of(InstanceMask.from_bitmap(bm))
            proposals.append(Proposal(box, 0.99, grid))
        self.merge_log.append(n_merged)
        pms = ProbabilityMaskSet(gt.width, gt.height, tuple(proposals))
        return pms, self.context_for(gt, n_merged)

    def judge(self, mask: InstanceMask, context: OracleContext) -> float:
        if not context.gt and not context.merged:
            return 1.0 - EPS
        label = assign_judgment_label(mask, context.gt, context.merged)
        return 1.0 - EPS if label == 1 else EPS

    def decompose(self, mask: InstanceMask, context: OracleContext):
        K = self.K
        if not context.merged:
            return [None] * K, [EPS] * K
        best = max(range(len(context.merged)), key=lambda i: mask_iou(mask, context.merged[i]))
        comps = order_components(context.components[best])
        if len(comps) > K:
            raise ValueError(f"cluster has {len(comps)} components, more than K={K}")
        k = len(comps)
        return list(comps) + [None] * (K - k), [1.0 - EPS] * k + [EPS] * (K - k)

    def weights(self) -> WeightVector:
        return self._weights

    def set_weights(self, w: WeightVector) -> None:
        self._weights = w

    def train_step(self, streams: dict) -> dict:
        return {name: LossComponents.mean([reference_losses(img, sc, self._weights) for img, sc in batch])
                for name, batch in streams.items()}


# -- reference student -------------------------------------------------------

def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def reference_losses(image: np.ndarray, labels: Scene, w: WeightVector, K: int = MAX_INSTANCES) -> LossComponents:
    """Loss components of a fixed "darker is foreground" model on one sample."""
    v = np.asarray(w.values, dtype=float)
    slope = 8.0 + abs(float(v[0])) if v.size > 0 else 8.0
    thr = 0.75 + 0.05 * math.tanh(float(v[1])) if v.size > 1 else 0.75
    probs = _sigmoid(slope * (thr - np.asarray(image, dtype=float) / 255.0))
    target = np.zeros(probs.shape, dtype=bool)
    for m in labels.instances:
        target |= m.bitmap
    seg = seg_cross_entropy(target, probs)
    if not labels.instances:
        return LossComponents(cls=focal_loss(1.0 - float(probs.mean())), seg=seg)

    cls_terms, reg_terms = [], []
    fg = probs >= 0.5
    for m in labels.instances:
        cls_terms.append(focal_loss(float(probs[m.bitmap].mean())))
        box = bbox_of(m)
        win = fg[box.y:box.y + box.h, box.x:box.x + box.w]
        if win.any():
            pb = bbox_of(InstanceMask.from_bitmap(win))
            pred = ((pb.x) / box.w, (pb.y) / box.h, math.log(pb.w / box.w), math.log(pb.h / box.h))
        else:
            pred = (0.0, 0.0, 0.0, 0.0)
        reg_terms.append(smooth_l1((0.0, 0.0, 0.0, 0.0), pred))

    samples = build_judgment_training_set(labels)
    y, p = [], []
    for s in samples:
        box = bbox_of(s.mask)
        fill = s.mask.area / (box.w * box.h) / (math.pi / 4.0)
        y.append(float(s.label))
        p.append(min(max(fill, EPS), 1.0 - EPS))
    o_cls = binary_cross_entropy(y, p)

    typical = float(np.median([m.area for m in labels.instances]))
    count_terms, iou_terms = [], []
    for s in samples:
        if s.label != 0 or len(s.component_masks) > K:
            continue
        target_k = build_decomposition_target(s, K).k
        est = s.mask.area / typical
        exist = [float(_sigmoid(2.0 * (est - j - 0.5))) for j in range(K)]
        count_terms.append(count_bce(target_k, exist))
        core = ndimage.binary_erosion(s.mask.bitmap, iterations=2)
        lab, n = ndimage.label(core)
        preds = [lab == i for i in range(1, n + 1)] or [s.mask.bitmap]
        iou_terms.append(decomposition_iou_loss(preds, s.component_masks))
    mean = lambda xs: float(np.mean(xs)) if xs else 0.0
    return LossComponents(mean(cls_terms), mean(reg_terms), seg, o_cls, mean(count_terms), mean(iou_terms))


class ReferenceStudent:
    """Student backend whose weights only change through ``set_weights``."""

    def __init__(self, seed: int = 0, dim: int = 8):
        rng = np.random.default_rng(seed)
        self._weights = WeightVector(rng.normal(0.0, 1.0, dim), "reference/v1")
        self.steps = 0

    def weights(self) -> WeightVector:
        return self._weights

    def set_weights(self, w: WeightVector) -> None:
        self._weights = w

    def train_step(self, streams: dict) -> dict:
        self.steps += 1
        return {name: LossComponents.mean([reference_losses(img, sc, self._weights) for img, sc in batch])
                for name, batch in streams.items()}


def procedural_generator(**overrides) -> ProceduralGenerator:
    return ProceduralGenerator(**overrides)
