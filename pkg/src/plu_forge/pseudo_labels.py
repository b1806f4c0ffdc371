"""
Pseudo-label thresholding and pseudo-label unmixing (PLU).

PLU replaces masks that a judgment backend flags as merged overlaps with
the constituent masks proposed by a decomposition backend.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .masks import (BoundingBox, InstanceMask, MaskError, Scene, mask_iou,
                    merge_masks, overlap_clusters)

logger = logging.getLogger(__name__)

BOX_THRESHOLD = 0.7
PIXEL_THRESHOLD = 0.5
MAX_INSTANCES = 5


class PLUError(RuntimeError):
    """A judgment or decomposition backend failed on a specific mask."""

    def __init__(self, instance_id, cause):
        super().__init__(f"PLU backend failed on mask {instance_id}: {cause}")
        self.instance_id = instance_id


@dataclass(frozen=True)
class Proposal:
    box: BoundingBox
    box_score: float
    prob_grid: np.ndarray


@dataclass(frozen=True)
class ProbabilityMaskSet:
    width: int
    height: int
    proposals: tuple[Proposal, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "proposals", tuple(self.proposals))
        for i, p in enumerate(self.proposals):
            grid = np.asarray(p.prob_grid)
            if grid.shape != (self.height, self.width):
                raise MaskError(f"proposal {i}: grid {grid.shape} != {(self.height, self.width)}")
            if not 0.0 <= p.box_score <= 1.0:
                raise ValueError(f"proposal {i}: box score {p.box_score} outside [0, 1]")
            if grid.size and (grid.min() < 0.0 or grid.max() > 1.0):
                raise ValueError(f"proposal {i}: probabilities outside [0, 1]")


@dataclass(frozen=True)
class Provenance:
    source_index: int
    box_score: float


@dataclass(frozen=True)
class CorrectionRecord:
    original_id: int
    replacement_ids: tuple[int, ...]
    reason: Optional[str] = None


@dataclass(frozen=True)
class PseudoLabelSet:
    width: int
    height: int
    masks: tuple[InstanceMask, ...] = ()
    provenance: tuple[Provenance, ...] = ()
    correction_log: tuple[CorrectionRecord, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "masks", tuple(self.masks))
        object.__setattr__(self, "provenance", tuple(self.provenance))
        object.__setattr__(self, "correction_log", tuple(self.correction_log))
        if len(self.provenance) != len(self.masks):
            raise ValueError("one provenance entry per mask is required")

    def to_scene(self, image_path: Optional[str] = None) -> Scene:
        return Scene(image_path, self.width, self.height, self.masks,
                     scores=tuple(p.box_score for p in self.provenance))


@dataclass(frozen=True)
class JudgmentSample:
    mask: InstanceMask
    label: int
    component_masks: tuple[InstanceMask, ...]


@dataclass(frozen=True)
class DecompositionTarget:
    k: int
    slots: tuple[Optional[InstanceMask], ...]
    existence: tuple[bool, ...]


def threshold_pseudo_labels(raw: ProbabilityMaskSet, theta_box: float = BOX_THRESHOLD,
                            theta_p: float = PIXEL_THRESHOLD) -> PseudoLabelSet:
    """Box-score filter followed by per-pixel thresholding (``P >= theta_p``).

    Surviving masks get ids 1, 2, ... in proposal order; empty masks are dropped.
    """
    masks, prov = [], []
    for idx, p in enumerate(raw.proposals):
        if p.box_score < theta_box:
            continue
        bitmap = np.asarray(p.prob_grid) >= theta_p
        if not bitmap.any():
            continue
        masks.append(InstanceMask.from_bitmap(bitmap, len(masks) + 1))
        prov.append(Provenance(idx, float(p.box_score)))
    return PseudoLabelSet(raw.width, raw.height, tuple(masks), tuple(prov))


def build_judgment_training_set(gt: Scene) -> list[JudgmentSample]:
    """Correct samples for every instance, erroneous ones for every overlap cluster.

    Merged masks take ids after the largest ground-truth id.
    """
    samples = [JudgmentSample(m, 1, (m,)) for m in gt.instances]
    next_id = max(gt.ids, default=0) + 1
    for cluster in overlap_clusters(gt.instances):
        if len(cluster) < 2:
            continue
        members = tuple(gt.instances[i] for i in cluster)
        samples.append(JudgmentSample(merge_masks(members, next_id), 0, members))
        next_id += 1
    return samples


def assign_judgment_label(pred: InstanceMask, correct_masks: Sequence[InstanceMask],
                          erroneous_masks: Sequence[InstanceMask]) -> int:
    if not correct_masks and not erroneous_masks:
        raise ValueError("need at least one correct or erroneous reference mask")
    iou_c = max((mask_iou(pred, m) for m in correct_masks), default=0.0)
    iou_e = max((mask_iou(pred, m) for m in erroneous_masks), default=0.0)
    return 1 if iou_c > iou_e else 0


def order_components(masks: Sequence[InstanceMask]) -> list[InstanceMask]:
    return sorted(masks, key=lambda m: (-m.area, m.instance_id))


def build_decomposition_target(sample: JudgmentSample, K: int = MAX_INSTANCES) -> DecompositionTarget:
    if sample.label != 0:
        raise ValueError("decomposition targets are built for erroneous samples only")
    k = len(sample.component_masks)
    if k > K:
        ids = [m.instance_id for m in sample.component_masks]
        raise ValueError(f"cluster of merged mask {sample.mask.instance_id} has {k} "
                         f"components {ids}, more than K={K}")
    comps = order_components(sample.component_masks)
    return DecompositionTarget(k, tuple(comps) + (None,) * (K - k),
                               (True,) * k + (False,) * (K - k))


JudgeFn = Callable[[InstanceMask], float]
DecomposeFn = Callable[[InstanceMask], tuple[Sequence[Optional[InstanceMask]], Sequence[float]]]


def apply_plu(pseudo: PseudoLabelSet, judge: JudgeFn, decompose: DecomposeFn,
              judge_threshold: float = 0.5, exist_threshold: float = 0.5,
              max_workers: Optional[int] = None) -> PseudoLabelSet:
    """Replace masks judged erroneous by their decomposed components.

    ``judge`` returns the probability that a mask is correct; masks below
    ``judge_threshold`` go to ``decompose``, whose slots with existence
    probability ``>= exist_threshold`` become replacements. When no slot
    survives the original mask is kept and the log records why.
    """

    def process(m: InstanceMask):
        try:
            p_correct = float(judge(m))
            if p_correct >= judge_threshold:
                return None
            slots, probs = decompose(m)
        except Exception as exc:
            raise PLUError(m.instance_id, exc) from exc
        return [s for s, e in zip(slots, probs) if s is not None and e >= exist_threshold]

    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            results = list(pool.map(process, pseudo.masks))
    else:
        results = [process(m) for m in pseudo.masks]

    next_id = max((m.instance_id for m in pseudo.masks), default=0) + 1
    masks, prov, log = [], [], list(pseudo.correction_log)
    for m, pv, res in zip(pseudo.masks, pseudo.provenance, results):
        if res is None:
            masks.append(m)
            prov.append(pv)
            continue
        if not res:
            logger.info("mask %s judged erroneous but decomposition kept no slot", m.instance_id)
            masks.append(m)
            prov.append(pv)
            log.append(CorrectionRecord(m.instance_id, (), "no surviving decomposition slots"))
            continue
        new_ids = []
        for comp in res:
            masks.append(comp.with_id(next_id))
            prov.append(pv)
            new_ids.append(next_id)
            next_id += 1
        log.append(CorrectionRecord(m.instance_id, tuple(new_ids)))
    return PseudoLabelSet(pseudo.width, pseudo.height, tuple(masks), tuple(prov), tuple(log))


def n_corrections(pseudo: PseudoLabelSet) -> int:
    """Number of masks actually replaced (no-op records excluded)."""
    return sum(1 for r in pseudo.correction_log if r.replacement_ids)
