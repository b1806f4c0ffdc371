"""
Image-level augmentations for the teacher (weak) and student (strong) views.

Weak augmentation is geometric and applied identically to the image and
its masks. Strong augmentation is photometric and leaves labels untouched.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .masks import InstanceMask, Scene


@dataclass(frozen=True)
class WeakParams:
    flip: bool = False
    scale: float = 1.0


def sample_weak(rng: np.random.Generator, p_flip: float = 0.5,
                scale_range: tuple[float, float] = (0.9, 1.1)) -> WeakParams:
    flip = bool(rng.random() < p_flip)
    return WeakParams(flip, float(rng.uniform(*scale_range)))


def _source_coords(shape: tuple[int, int], scale: float) -> tuple[np.ndarray, np.ndarray]:
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    return (yy - cy) / scale + cy, (xx - cx) / scale + cx


def weak_image(image: np.ndarray, params: WeakParams) -> np.ndarray:
    """Zoom about the image centre (bilinear, edge-clamped), then mirror left-right."""
    out = np.asarray(image)
    if params.scale != 1.0:
        sy, sx = _source_coords(out.shape, params.scale)
        out = ndimage.map_coordinates(out.astype(float), [sy, sx], order=1, mode="nearest")
        if np.issubdtype(np.asarray(image).dtype, np.integer):
            out = np.clip(np.rint(out), 0, 255).astype(np.asarray(image).dtype)
    else:
        out = out.copy()
    if params.flip:
        out = out[:, ::-1].copy()
    return out


def weak_bitmap(bitmap: np.ndarray, params: WeakParams) -> np.ndarray:
    out = np.asarray(bitmap, dtype=bool)
    if params.scale != 1.0:
        h, w = out.shape
        sy, sx = _source_coords(out.shape, params.scale)
        iy = np.floor(sy + 0.5).astype(np.int64)
        ix = np.floor(sx + 0.5).astype(np.int64)
        inside = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        res = np.zeros_like(out)
        res[inside] = out[iy[inside], ix[inside]]
        out = res
    if params.flip:
        out = out[:, ::-1]
    return out.copy()


def weak_scene(scene: Scene, params: WeakParams) -> Scene:
    """Apply the geometric view to every mask; masks that vanish are dropped."""
    masks, keep = [], []
    for i, m in enumerate(scene.instances):
        bm = weak_bitmap(m.bitmap, params)
        if bm.any():
            masks.append(InstanceMask.from_bitmap(bm, m.instance_id))
            keep.append(i)
    pick = lambda v: None if v is None else tuple(v[i] for i in keep)
    return Scene(scene.image_path, scene.width, scene.height, tuple(masks),
                 None, pick(scene.scores), pick(scene.categories))


def weak_augment(image: np.ndarray, labels: Optional[Scene], rng: np.random.Generator,
                 scale_range: tuple[float, float] = (0.9, 1.1)):
    params = sample_weak(rng, scale_range=scale_range)
    out_labels = weak_scene(labels, params) if labels is not None else None
    return weak_image(image, params), out_labels, params


def apply_cutout(image: np.ndarray, top: int, left: int, height: int, width: int) -> np.ndarray:
    out = np.array(image, dtype=float)
    fill = out.mean()
    out[top:top + height, left:left + width] = fill
    return out


def strong_augment(image: np.ndarray, rng: np.random.Generator, *, p_jitter: float = 0.5,
                   p_gray: float = 0.5, p_blur: float = 0.5, p_cutout: float = 0.5,
                   return_ops: bool = False):
    """Photometric augmentation returning a float image clipped to [0, 255].

    Each op fires independently with its probability: brightness/contrast
    jitter (+-20%), contrast flattening by half (the grayscale stand-in for
    already-gray images), Gaussian blur with sigma in [0.5, 2] and a single
    cutout covering 2-10% of the image filled with the image mean.
    """
    out = np.array(image, dtype=float)
    ops = []
    if rng.random() < p_jitter:
        brightness = rng.uniform(0.8, 1.2)
        contrast = rng.uniform(0.8, 1.2)
        mean = out.mean()
        out = (out - mean) * contrast + mean * brightness
        ops.append(("jitter", brightness, contrast))
    if rng.random() < p_gray:
        mean = out.mean()
        out = mean + 0.5 * (out - mean)
        ops.append(("gray",))
    if rng.random() < p_blur:
        sigma = rng.uniform(0.5, 2.0)
        out = ndimage.gaussian_filter(out, sigma)
        ops.append(("blur", sigma))
    if rng.random() < p_cutout:
        h, w = out.shape
        frac = rng.uniform(0.02, 0.10)
        aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
        ch = int(np.clip(round(np.sqrt(frac * h * w * aspect)), 1, h))
        cw = int(np.clip(round(frac * h * w / ch), 1, w))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        fill = float(np.clip(out, 0, 255).mean())
        out = np.clip(out, 0, 255)
        out[top:top + ch, left:left + cw] = fill
        ops.append(("cutout", (top, left, ch, cw), fill))
    out = np.clip(out, 0, 255)
    return (out, ops) if return_ops else out
