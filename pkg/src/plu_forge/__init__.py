"""Pseudo-label unmixing, contour-driven synthesis and evaluation for overlapping-instance segmentation."""

__version__ = "0.1.0"

from .masks import (BoundingBox, InstanceMask, MaskError, Scene, bbox_of, decode_rle,
                    encode_rle, extract_contour, mask_iou, merge_masks, severe_overlap_flags)
from .matching import hungarian_match
from .weights import WeightVector, ema_update

__all__ = [
    "BoundingBox", "InstanceMask", "MaskError", "Scene", "bbox_of", "decode_rle", "encode_rle",
    "extract_contour", "mask_iou", "merge_masks", "severe_overlap_flags", "hungarian_match",
    "WeightVector", "ema_update",
]
