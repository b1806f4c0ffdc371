"""
Contour-image construction, instance-level augmentation and image synthesis.

Instances are grouped into four appearance categories by transparency
(mean gray value) and focus (variance of the Laplacian), and each
instance's boundary is drawn into a single paletted contour raster in its
category index. A pluggable generator turns that raster into an image.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
from scipy import ndimage

from .losses import EPS
from .masks import InstanceMask, MaskError, Scene, contour_raster, overlap_pairs, stack_bitmaps

logger = logging.getLogger(__name__)

N_CATEGORIES = 4


@dataclass(frozen=True)
class InstanceAppearance:
    transparency: float
    focus: float
    category: int


@dataclass(frozen=True)
class ContourImage:
    pixels: np.ndarray  # uint8 palette indices 0..4

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.uint8)
        if px.ndim != 2:
            raise ValueError("contour image must be 2-D")
        if px.size and px.max() > N_CATEGORIES:
            raise ValueError(f"palette index {int(px.max())} outside 0..{N_CATEGORIES}")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class AugmentationPolicy:
    """Per-instance augmentation ranges.

    ``translate`` is a shift magnitude in pixels applied independently to x
    and y with a random sign; ``rotate`` is in degrees.
    """

    translate: bool = False
    rotate: bool = False
    scale: bool = False
    translate_range: tuple[float, float] = (1, 10)
    rotate_range: tuple[float, float] = (0.0, 360.0)
    scale_range: tuple[float, float] = (0.9, 1.1)
    seed: int = 0

    def __post_init__(self):
        for name in ("translate_range", "rotate_range", "scale_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty: {lo} > {hi}")
        if self.scale_range[0] <= 0:
            raise ValueError("scale factors must be positive")

    @classmethod
    def from_code(cls, code: str, seed: int = 0, **ranges) -> "AugmentationPolicy":
        """Build from a combination code such as ``"S"``, ``"RT"`` or ``"SRT"``."""
        code = code.upper()
        if code in ("", "NONE", "WITHOUT"):
            code = ""
        if set(code) - set("SRT"):
            raise ValueError(f"unknown augmentation code {code!r}")
        return cls(translate="T" in code, rotate="R" in code, scale="S" in code,
                   seed=seed, **ranges)


@dataclass(frozen=True)
class SynthesisConfig:
    generator: str = "procedural"
    n_scales: int = 3
    fm_weight: float = 10.0

    def __post_init__(self):
        if self.n_scales < 1:
            raise ValueError("need at least one discriminator scale")
        if self.fm_weight < 0:
            raise ValueError("fm_weight must be non-negative")


# -- appearance --------------------------------------------------------------

def _check_dims(image: np.ndarray, mask: InstanceMask) -> np.ndarray:
    image = np.asarray(image, dtype=float)
    if image.shape != mask.shape:
        raise MaskError(f"image {image.shape} and mask {mask.shape} differ")
    if mask.area == 0:
        raise MaskError(f"instance {mask.instance_id} is empty")
    return image


def laplacian(image: np.ndarray) -> np.ndarray:
    """4-neighbour discrete Laplacian with edge replication."""
    p = np.pad(np.asarray(image, dtype=float), 1, mode="edge")
    return p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4.0 * p[1:-1, 1:-1]


def instance_transparency(image: np.ndarray, mask: InstanceMask) -> float:
    image = _check_dims(image, mask)
    return float(image[mask.bitmap].mean())


def instance_focus(image: np.ndarray, mask: InstanceMask) -> float:
    """Population variance of the Laplacian over the instance's pixels."""
    image = _check_dims(image, mask)
    values = laplacian(image)[mask.bitmap]
    return float(np.mean((values - values.mean()) ** 2))


def categorize(appearances: Sequence[tuple[float, float]], thresholds: tuple[float, float]) -> list[int]:
    t_t, t_f = thresholds
    return [1 + int(t > t_t) + 2 * int(f > t_f) for t, f in appearances]


def measure_appearances(image: np.ndarray, scene: Scene) -> list[tuple[float, float]]:
    return [(instance_transparency(image, m), instance_focus(image, m)) for m in scene.instances]


def fit_category_thresholds(labeled: Sequence[tuple[np.ndarray, Scene]]) -> tuple[float, float]:
    """Median transparency and focus over every labeled instance."""
    values = [tf for image, scene in labeled for tf in measure_appearances(image, scene)]
    if not values:
        raise ValueError("no labeled instances to fit category thresholds")
    arr = np.asarray(values)
    return float(np.median(arr[:, 0])), float(np.median(arr[:, 1]))


# -- contour rendering -------------------------------------------------------

def _rows_single_run(mask: InstanceMask) -> bool:
    """True when no image row holds two separate foreground runs."""
    runs, w = mask.runs, mask.width
    pos = runs[0]
    for k in range(1, len(runs) - 2, 2):
        fg_end = pos + runs[k]
        gap = runs[k + 1]
        if (fg_end - 1) // w == (fg_end + gap) // w:
            return False
        pos = fg_end + gap
    return True


def _row_band(mask: InstanceMask) -> tuple[int, int]:
    """First and one-past-last row holding foreground, read off the runs."""
    runs, w = mask.runs, mask.width
    first = runs[0] // w
    tail = runs[-1] if len(runs) % 2 else 0
    return first, (mask.width * mask.height - tail - 1) // w + 1


def _boundaries(masks: Sequence[InstanceMask]) -> tuple[int, np.ndarray]:
    """Contour pixels of all masks over a shared row band, bit-packed along the mask axis.

    Returns the band's first row and a ``(ceil(n / 8), rows, w)`` uint8 array
    whose bit ``b`` of plane ``j`` marks the contour of mask ``8 * j + b``.
    A mask whose rows each hold a single run cannot enclose background, so
    its contour is the 4-neighbour erosion residue. Other masks go through
    the general raster.
    """
    h = masks[0].height
    bands = [_row_band(m) for m in masks]
    r0 = max(min(b[0] for b in bands) - 1, 0)
    r1 = min(max(b[1] for b in bands) + 1, h)
    n = len(masks)
    coded = stack_bitmaps(masks, (r0, r1), values=[1 << (i % 8) for i in range(n)])
    bits = np.stack([np.bitwise_or.reduce(coded[j:j + 8], axis=0) for j in range(0, n, 8)])
    k, rows, w = bits.shape
    if rows < 3 or w < 3:
        line = bits
    else:
        # erosion is bitwise, so one pass handles eight masks
        flat = bits.reshape(k, -1)
        line = flat.copy()
        inner = flat[:, :-2 * w] & flat[:, 2 * w:]
        inner &= flat[:, w - 1:-w - 1]
        inner &= flat[:, w + 1:-w + 1]
        line[:, w:-w] &= ~inner
        line = line.reshape(k, rows, w)
        # the flat shifts wrap across rows; border columns have an outside neighbour anyway
        line[:, :, 0] = bits[:, :, 0]
        line[:, :, -1] = bits[:, :, -1]
    for i, m in enumerate(masks):
        if not _rows_single_run(m):
            j, b = divmod(i, 8)
            line[j] &= np.uint8(0xFF ^ (1 << b))
            line[j] |= contour_raster(coded[i] != 0).view(np.uint8) << np.uint8(b)
    return r0, line


# 1 + index of the highest set bit of a byte, 0 for no bit
_TOP_BIT = np.array([v.bit_length() for v in range(256)], dtype=np.intp)


def _brush(line: np.ndarray, width: int) -> np.ndarray:
    """Max-dilate along the last two axes with a ``width`` x ``width`` brush anchored top-left.

    On a boolean raster this is the usual dilation.
    """
    if width < 1:
        raise ValueError(f"stroke width must be >= 1, got {width}")
    tall = line.copy()
    for k in range(1, width):
        np.maximum(tall[..., k:, :], line[..., :-k, :], out=tall[..., k:, :])
    out = tall.copy()
    for k in range(1, width):
        np.maximum(out[..., :, k:], tall[..., :, :-k], out=out[..., :, k:])
    return out


def stroke(bitmap: np.ndarray, width: int = 2) -> np.ndarray:
    """Boundary of ``bitmap`` drawn with a ``width`` x ``width`` brush anchored top-left."""
    bitmap = np.asarray(bitmap, dtype=bool)
    if not bitmap.any():
        return np.zeros_like(bitmap)
    r0, line = _boundaries([InstanceMask.from_bitmap(bitmap)])
    out = np.zeros_like(bitmap)
    out[r0:r0 + line.shape[1]] = line[0] != 0
    return _brush(out, width)


def render_contour_image(scene: Scene, categories: Sequence[int], stroke_width: int = 2) -> ContourImage:
    """Single paletted raster of all instance contours.

    Where strokes of different instances meet, the instance with the larger
    ``instance_id`` owns the pixel.
    """
    n = len(scene.instances)
    if len(categories) != n:
        raise ValueError("one category per instance is required")
    if n and (min(categories) < 1 or max(categories) > N_CATEGORIES):
        raise ValueError(f"categories must lie in 1..{N_CATEGORIES}")
    if not n:
        return ContourImage(np.zeros((scene.height, scene.width), dtype=np.uint8))
    order = sorted(range(n), key=lambda i: scene.instances[i].instance_id)
    r0, line = _boundaries([scene.instances[i] for i in order])
    # the latest instance in id order owns a pixel, i.e. the highest set bit;
    # a byte's top bit is monotone in its value, so dilating the packed
    # planes with max keeps that owner
    k, rows, w = line.shape
    r1 = min(r0 + rows + stroke_width - 1, scene.height)
    planes = np.zeros((k, r1 - r0, w), dtype=np.uint8)
    planes[:, :rows] = line
    planes = _brush(planes, stroke_width)
    cats = [int(categories[i]) for i in order]
    canvas = np.zeros((scene.height, scene.width), dtype=np.uint8)
    band = canvas[r0:r1]
    for j in range(k):
        chunk = cats[8 * j:8 * j + 8]
        lut = np.array([0] + chunk + [0] * (8 - len(chunk)), dtype=np.uint8)[_TOP_BIT]
        painted = lut.take(planes[j])
        np.copyto(band, painted, where=painted > 0)
    return ContourImage(canvas)


def layered_mask_decomposition(scene: Scene, categories: Optional[Sequence[int]] = None) -> list[np.ndarray]:
    """Mask-based alternative to contours: one semantic raster per layer.

    Overlapping instances never share a layer, so every instance keeps its
    full extent. Layers are assigned by greedy colouring of the overlap graph
    (largest degree first), so the layer count is at least the largest set
    of mutually overlapping instances.
    """
    n = len(scene.instances)
    if categories is None:
        categories = [1] * n
    adj: list[set[int]] = [set() for _ in range(n)]
    for i, j in overlap_pairs(scene.instances):
        adj[i].add(j)
        adj[j].add(i)
    layer_of = [-1] * n
    for i in sorted(range(n), key=lambda k: (-len(adj[k]), k)):
        taken = {layer_of[j] for j in adj[i]}
        layer = 0
        while layer in taken:
            layer += 1
        layer_of[i] = layer
    n_layers = max(layer_of, default=0) + 1
    rasters = [np.zeros((scene.height, scene.width), dtype=np.uint8) for _ in range(n_layers)]
    for i, m in enumerate(scene.instances):
        rasters[layer_of[i]][m.bitmap] = categories[i]
    return rasters


# -- instance-level augmentation --------------------------------------------

def transform_mask(bitmap: np.ndarray, scale: float = 1.0, angle_deg: float = 0.0,
                   shift: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Scale, then rotate about the mask centroid, then translate by ``shift = (dx, dy)``.

    Nearest-neighbour inverse mapping; pixels mapped from outside the grid
    are background.
    """
    bitmap = np.asarray(bitmap, dtype=bool)
    h, w = bitmap.shape
    if not bitmap.any():
        return bitmap.copy()
    rows, cols = np.nonzero(bitmap)
    cy, cx = rows.mean(), cols.mean()
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    # undo translation, then rotation, then scale
    ux = xx - shift[0] - cx
    uy = yy - shift[1] - cy
    rx = (cos_t * ux + sin_t * uy) / scale
    ry = (-sin_t * ux + cos_t * uy) / scale
    src_x = np.floor(rx + cx + 0.5).astype(np.int64)
    src_y = np.floor(ry + cy + 0.5).astype(np.int64)
    inside = (src_x >= 0) & (src_x < w) & (src_y >= 0) & (src_y < h)
    out = np.zeros_like(bitmap)
    out[inside] = bitmap[src_y[inside], src_x[inside]]
    return out


def sample_instance_transform(policy: AugmentationPolicy, rng: np.random.Generator) -> tuple[float, float, tuple[float, float]]:
    scale = rng.uniform(*policy.scale_range) if policy.scale else 1.0
    angle = rng.uniform(*policy.rotate_range) if policy.rotate else 0.0
    if policy.translate:
        lo, hi = policy.translate_range
        mags = rng.integers(int(lo), int(hi) + 1, size=2)
        signs = rng.choice((-1, 1), size=2)
        shift = (float(mags[0] * signs[0]), float(mags[1] * signs[1]))
    else:
        shift = (0.0, 0.0)
    return scale, angle, shift


def augment_instances(scene: Scene, policy: AugmentationPolicy,
                      rng: Optional[np.random.Generator] = None) -> Scene:
    """Independently transform every instance; drop ones that leave the image."""
    if rng is None:
        rng = np.random.default_rng(policy.seed)
    if not (policy.translate or policy.rotate or policy.scale):
        return scene
    keep_masks, keep_idx = [], []
    for i, m in enumerate(scene.instances):
        scale, angle, shift = sample_instance_transform(policy, rng)
        moved = transform_mask(m.bitmap, scale, angle, shift)
        if not moved.any():
            logger.info("instance %s dropped by augmentation", m.instance_id)
            continue
        keep_masks.append(InstanceMask.from_bitmap(moved, m.instance_id))
        keep_idx.append(i)
    pick = lambda v: None if v is None else tuple(v[i] for i in keep_idx)
    return Scene(scene.image_path, scene.width, scene.height, tuple(keep_masks),
                 None, pick(scene.scores), pick(scene.categories))


# -- generators --------------------------------------------------------------

class Generator(Protocol):
    def __call__(self, contours: ContourImage, seed: int = 0) -> np.ndarray: ...


@dataclass(frozen=True)
class ProceduralGenerator:
    """Deterministic contour-to-image renderer used in place of a learned generator.

    Each category's filled contours are painted with a fixed gray value and
    blurred with that category's radius (Gaussian sigma), layers combine by
    darker-wins, then seeded Gaussian noise is added.
    """

    fill: tuple[float, ...] = (80.0, 160.0, 80.0, 160.0)
    blur: tuple[float, ...] = (0.0, 0.0, 2.0, 2.0)
    background: float = 220.0
    noise_sigma: float = 3.0

    def __call__(self, contours: ContourImage, seed: int = 0) -> np.ndarray:
        px = np.asarray(contours.pixels)
        if px.size and px.max() > N_CATEGORIES:
            raise ValueError(f"unknown palette index {int(px.max())}")
        image = np.full(px.shape, self.background, dtype=float)
        for cat in range(1, N_CATEGORIES + 1):
            lines = px == cat
            if not lines.any():
                continue
            region = ndimage.binary_fill_holes(lines)
            layer = np.where(region, self.fill[cat - 1], self.background)
            if self.blur[cat - 1] > 0:
                layer = ndimage.gaussian_filter(layer, self.blur[cat - 1], mode="nearest")
            np.minimum(image, layer, out=image)
        if self.noise_sigma > 0:
            image += np.random.default_rng(seed).normal(0.0, self.noise_sigma, image.shape)
        return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def synthesize(contours: ContourImage, backend: Callable, seed: int = 0) -> np.ndarray:
    try:
        out = np.asarray(backend(contours, seed))
    except Exception as exc:
        raise RuntimeError(f"generator backend failed: {exc}") from exc
    if out.shape != contours.pixels.shape:
        raise RuntimeError(f"generator returned shape {out.shape}, expected {contours.pixels.shape}")
    return out


# -- adversarial objective ---------------------------------------------------

def gan_objective(d_real: Sequence, d_fake: Sequence, feats_real: Sequence, feats_fake: Sequence,
                  cfg: SynthesisConfig = SynthesisConfig()) -> tuple[float, float, float]:
    """Evaluate the multi-scale adversarial and feature-matching terms.

    ``d_real[s]``/``d_fake[s]`` hold discriminator probabilities at scale
    ``s``; ``feats_real[s]`` is that scale's sequence of feature arrays. The
    feature-matching term is, per scale, the mean absolute difference over
    all feature elements.
    """
    n = cfg.n_scales
    if not (len(d_real) == len(d_fake) == len(feats_real) == len(feats_fake) == n):
        raise ValueError(f"expected {n} scales for every input")
    gan = 0.0
    fm = 0.0
    for s in range(n):
        dr = np.clip(np.asarray(d_real[s], dtype=float), EPS, 1 - EPS)
        df = np.clip(np.asarray(d_fake[s], dtype=float), EPS, 1 - EPS)
        gan += float(np.mean(np.log(dr)) + np.mean(np.log1p(-df)))
        fr, ff = feats_real[s], feats_fake[s]
        if len(fr) != len(ff):
            raise ValueError(f"scale {s}: feature sequences differ in length")
        diffs = []
        for a, b in zip(fr, ff):
            a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
            if a.shape != b.shape:
                raise ValueError(f"scale {s}: feature shapes {a.shape} and {b.shape} differ")
            diffs.append(np.abs(a - b).ravel())
        if diffs:
            fm += float(np.mean(np.concatenate(diffs)))
    return gan, fm, gan + cfg.fm_weight * fm
