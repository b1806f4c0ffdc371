"""
Run-length encoded instance masks, scenes, and overlap geometry.

Runs are row-major and always start with a background run (possibly 0),
then alternate foreground/background. This differs from the COCO
column-major convention; see :func:`to_coco_rle`.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

# 8-connectivity for foreground, 4-connectivity for background
_EIGHT = np.ones((3, 3), dtype=bool)
_FOUR = ndimage.generate_binary_structure(2, 1)


class MaskError(ValueError):
    pass


def encode_rle(bitmap: np.ndarray) -> tuple[int, ...]:
    """Encode a 2-D boolean array as row-major runs starting with background."""
    flat = np.asarray(bitmap, dtype=bool).ravel()
    if flat.size == 0:
        return (0,)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return tuple(int(r) for r in runs)


def decode_rle(runs: Sequence[int], width: int, height: int) -> np.ndarray:
    runs = np.asarray(runs, dtype=np.int64)
    values = (np.arange(runs.size) % 2).astype(bool)
    return np.repeat(values, runs).reshape(height, width)


def stack_bitmaps(masks: Sequence["InstanceMask"], rows: Optional[tuple[int, int]] = None,
                  values: Optional[Sequence[int]] = None) -> np.ndarray:
    """Decode same-grid masks into one ``(n, height, width)`` boolean array in a single pass.

    ``rows=(r0, r1)`` decodes only that band; every mask must be empty outside it.
    With ``values`` the result is uint8 and mask ``i`` paints ``values[i]``.
    """
    if not masks:
        raise MaskError("no masks to stack")
    h, w = masks[0].height, masks[0].width
    r0, r1 = (0, h) if rows is None else rows
    if not 0 <= r0 <= r1 <= h:
        raise MaskError(f"row band {rows} outside 0..{h}")
    head, tail = r0 * w, (h - r1) * w
    runs, vals = [], []
    for i, m in enumerate(masks):
        if (m.height, m.width) != (h, w):
            raise MaskError("masks must share one grid")
        r = list(m.runs)
        odd = len(r) % 2
        if r[0] < head or (tail and (not odd or r[-1] < tail)):
            raise MaskError(f"mask {m.instance_id} has foreground outside rows {r0}..{r1}")
        r[0] -= head
        if tail:
            r[-1] -= tail
        runs.extend(r)
        fg = True if values is None else values[i]
        vals.extend((0, fg) * (len(r) // 2) + (0,) * odd)
    flat = np.repeat(np.asarray(vals, dtype=bool if values is None else np.uint8), runs)
    return flat.reshape(len(masks), r1 - r0, w)


def validate_runs(runs: Sequence[int], width: int, height: int) -> None:
    if width < 1 or height < 1:
        raise MaskError(f"grid must be at least 1x1, got {width}x{height}")
    if len(runs) == 0:
        raise MaskError("empty run sequence")
    if any(r < 0 for r in runs):
        raise MaskError("negative run length")
    if any(r == 0 for r in runs[1:]):
        raise MaskError("zero-length run after the leading background run")
    total = sum(runs)
    if total != width * height:
        raise MaskError(f"runs sum to {total}, expected {width * height}")


@dataclass(frozen=True)
class BoundingBox:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise MaskError(f"degenerate box {self}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class InstanceMask:
    """One instance's binary mask over a fixed ``height x width`` grid."""

    width: int
    height: int
    runs: tuple[int, ...]
    instance_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "runs", tuple(int(r) for r in self.runs))
        validate_runs(self.runs, self.width, self.height)

    @classmethod
    def from_bitmap(cls, bitmap: np.ndarray, instance_id: int = 0) -> "InstanceMask":
        bitmap = np.asarray(bitmap, dtype=bool)
        if bitmap.ndim != 2:
            raise MaskError(f"expected a 2-D bitmap, got shape {bitmap.shape}")
        h, w = bitmap.shape
        return cls(w, h, encode_rle(bitmap), instance_id)

    @cached_property
    def bitmap(self) -> np.ndarray:
        bm = decode_rle(self.runs, self.width, self.height)
        bm.setflags(write=False)
        return bm

    @cached_property
    def area(self) -> int:
        return int(sum(self.runs[1::2]))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def with_id(self, instance_id: int) -> "InstanceMask":
        return InstanceMask(self.width, self.height, self.runs, instance_id)

    def same_pixels(self, other: "InstanceMask") -> bool:
        return self.shape == other.shape and self.runs == other.runs


@dataclass(frozen=True)
class Scene:
    """An image reference plus its instance masks.

    ``scores`` and ``categories`` are optional per-instance attributes
    carried alongside the masks (prediction confidences, appearance groups).
    """

    image_path: Optional[str]
    width: int
    height: int
    instances: tuple[InstanceMask, ...] = ()
    severe_overlap_flags: Optional[tuple[bool, ...]] = None
    scores: Optional[tuple[float, ...]] = None
    categories: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        n = len(self.instances)
        ids = set()
        for m in self.instances:
            if m.shape != (self.height, self.width):
                raise MaskError(
                    f"instance {m.instance_id} is {m.width}x{m.height}, "
                    f"scene is {self.width}x{self.height}"
                )
            if m.area < 1:
                raise MaskError(f"instance {m.instance_id} has no foreground pixels")
            if m.instance_id in ids:
                raise MaskError(f"duplicate instance_id {m.instance_id}")
            ids.add(m.instance_id)
        for name in ("severe_overlap_flags", "scores", "categories"):
            value = getattr(self, name)
            if value is not None:
                value = tuple(value)
                if len(value) != n:
                    raise MaskError(f"{name} has {len(value)} entries for {n} instances")
                object.__setattr__(self, name, value)

    def __len__(self):
        return len(self.instances)

    @property
    def ids(self) -> list[int]:
        return [m.instance_id for m in self.instances]

    def replace(self, **changes) -> "Scene":
        fields_ = dict(
            image_path=self.image_path,
            width=self.width,
            height=self.height,
            instances=self.instances,
            severe_overlap_flags=self.severe_overlap_flags,
            scores=self.scores,
            categories=self.categories,
        )
        fields_.update(changes)
        return Scene(**fields_)

    def subset(self, keep: Sequence[int]) -> "Scene":
        """Scene restricted to the instances at positions ``keep``."""
        pick = lambda v: None if v is None else tuple(v[i] for i in keep)
        return Scene(
            self.image_path,
            self.width,
            self.height,
            tuple(self.instances[i] for i in keep),
            pick(self.severe_overlap_flags),
            pick(self.scores),
            pick(self.categories),
        )


def _check_same_grid(a: InstanceMask, b: InstanceMask) -> None:
    if a.shape != b.shape:
        raise MaskError(f"grid mismatch: {a.width}x{a.height} vs {b.width}x{b.height}")


def mask_iou(a: InstanceMask, b: InstanceMask) -> float:
    _check_same_grid(a, b)
    inter = np.count_nonzero(a.bitmap & b.bitmap)
    union = a.area + b.area - inter
    if union == 0:
        return 0.0
    return inter / union


def merge_masks(masks: Sequence[InstanceMask], instance_id: Optional[int] = None) -> InstanceMask:
    """Pixelwise union of ``masks``.

    The merged mask gets ``instance_id`` if given, otherwise one more than
    the largest constituent id.
    """
    if len(masks) == 0:
        raise MaskError("merge_masks needs at least one mask")
    first = masks[0]
    out = np.zeros(first.shape, dtype=bool)
    for m in masks:
        _check_same_grid(first, m)
        out |= m.bitmap
    if instance_id is None:
        instance_id = max(m.instance_id for m in masks) + 1
    return InstanceMask.from_bitmap(out, instance_id)


def coverage(masks: Iterable[InstanceMask], shape: tuple[int, int]) -> np.ndarray:
    """Per-pixel count of masks covering each pixel."""
    count = np.zeros(shape, dtype=np.int32)
    for m in masks:
        count += m.bitmap
    return count


def severe_overlap_flags(scene: Scene, threshold: float = 1 / 3) -> list[bool]:
    """Flag instances whose shared area exceeds ``threshold`` of their own area."""
    if not scene.instances:
        return []
    count = coverage(scene.instances, (scene.height, scene.width))
    shared = count >= 2
    return [
        np.count_nonzero(m.bitmap & shared) / m.area > threshold
        for m in scene.instances
    ]


def overlap_pairs(masks: Sequence[InstanceMask]) -> list[tuple[int, int]]:
    """Index pairs ``(i, j)``, ``i < j``, of masks sharing at least one pixel."""
    boxes = [bbox_of(m) for m in masks]
    pairs = []
    for i in range(len(masks)):
        bi = boxes[i]
        for j in range(i + 1, len(masks)):
            bj = boxes[j]
            if (bi.x >= bj.x + bj.w or bj.x >= bi.x + bi.w
                    or bi.y >= bj.y + bj.h or bj.y >= bi.y + bi.h):
                continue
            if np.any(masks[i].bitmap & masks[j].bitmap):
                pairs.append((i, j))
    return pairs


def overlap_clusters(masks: Sequence[InstanceMask]) -> list[list[int]]:
    """Connected components (by index) of the "shares >= 1 pixel" relation.

    Every mask appears in exactly one cluster; singletons included. Clusters
    are listed by their smallest member index, members sorted.
    """
    parent = list(range(len(masks)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in overlap_pairs(masks):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, list[int]] = {}
    for i in range(len(masks)):
        groups.setdefault(find(i), []).append(i)
    return [groups[k] for k in sorted(groups)]


def bbox_of(mask: InstanceMask) -> BoundingBox:
    rows = np.flatnonzero(mask.bitmap.any(axis=1))
    if rows.size == 0:
        raise MaskError(f"instance {mask.instance_id} is empty")
    cols = np.flatnonzero(mask.bitmap.any(axis=0))
    return BoundingBox(int(cols[0]), int(rows[0]),
                       int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))


# -- boundary tracing -------------------------------------------------------

# clockwise on screen, rows growing downward: W, NW, N, NE, E, SE, S, SW
_MOORE = ((0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1))
_DIR_INDEX = {d: i for i, d in enumerate(_MOORE)}


@dataclass(frozen=True)
class Chain:
    """Closed boundary chain as ``(row, col)`` points; ``hole`` marks inner chains."""

    points: tuple[tuple[int, int], ...]
    hole: bool = False

    def __len__(self):
        return len(self.points)


def _moore_trace(region: np.ndarray, start: tuple[int, int]) -> list[tuple[int, int]]:
    # region is padded so every step stays in bounds; start is raster-first
    s = start
    b_dir = 0  # entered from the west
    p = s
    chain = [s]
    first_step = None
    limit = 4 * int(region.sum()) + 8
    for _ in range(limit):
        nxt = None
        for i in range(1, 9):
            d = (b_dir + i) % 8
            dr, dc = _MOORE[d]
            q = (p[0] + dr, p[1] + dc)
            if region[q]:
                nxt = q
                back = (b_dir + i - 1) % 8
                break
        if nxt is None:
            return chain  # isolated pixel
        if first_step is None:
            first_step = nxt
        elif p == s and nxt == first_step:
            chain.pop()  # drop the repeated start
            return chain
        # backtrack position relative to the new pixel
        br, bc = p[0] + _MOORE[back][0], p[1] + _MOORE[back][1]
        b_dir = _DIR_INDEX[(br - nxt[0], bc - nxt[1])]
        p = nxt
        chain.append(p)
    raise RuntimeError("boundary trace did not close")


def _trace_regions(labels: np.ndarray, n: int, hole: bool) -> list[Chain]:
    chains = []
    # raster-first pixel of each label
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    sorted_labels = flat[order]
    firsts = np.searchsorted(sorted_labels, np.arange(1, n + 1))
    width = labels.shape[1]
    for lab, pos in zip(range(1, n + 1), firsts):
        idx = order[pos]
        start = (idx // width, idx % width)
        region = labels == lab
        pts = _moore_trace(region, start)
        chains.append(Chain(tuple((r - 1, c - 1) for r, c in pts), hole))
    return chains


def extract_contour(mask: InstanceMask) -> list[Chain]:
    """Moore boundary chains of ``mask``.

    One outer chain per 8-connected foreground component, followed by one
    chain per hole (a 4-connected background region not reaching the image
    border). Hole chains trace the hole region itself.
    """
    fg = np.pad(mask.bitmap, 1)
    fg_labels, n_fg = ndimage.label(fg, structure=_EIGHT)
    chains = _trace_regions(fg_labels, n_fg, hole=False)
    bg_labels, n_bg = ndimage.label(~fg, structure=_FOUR)
    outside = bg_labels[0, 0]
    if n_bg > 1:
        relabel = np.zeros(n_bg + 1, dtype=np.int64)
        holes = [lab for lab in range(1, n_bg + 1) if lab != outside]
        relabel[holes] = np.arange(1, len(holes) + 1)
        chains += _trace_regions(relabel[bg_labels], len(holes), hole=True)
    return chains


def _outer_boundary(region: np.ndarray) -> np.ndarray:
    filled = ndimage.binary_fill_holes(region)
    inner = ndimage.binary_erosion(filled, structure=_FOUR, border_value=0)
    return region & ~inner


def contour_raster(bitmap: np.ndarray) -> np.ndarray:
    """Boolean raster of the pixels visited by :func:`extract_contour`."""
    bitmap = np.asarray(bitmap, dtype=bool)
    filled = ndimage.binary_fill_holes(bitmap)
    if np.array_equal(filled, bitmap):
        return bitmap & ~ndimage.binary_erosion(bitmap, structure=_FOUR, border_value=0)
    out = np.zeros_like(bitmap)
    fg_labels, n_fg = ndimage.label(bitmap, structure=_EIGHT)
    for lab in range(1, n_fg + 1):
        out |= _outer_boundary(fg_labels == lab)
    hole_labels, n_holes = ndimage.label(filled & ~bitmap, structure=_FOUR)
    for lab in range(1, n_holes + 1):
        out |= _outer_boundary(hole_labels == lab)
    return out


def rasterize_chains(chains: Iterable[Chain], shape: tuple[int, int]) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    for ch in chains:
        if ch.points:
            pts = np.asarray(ch.points)
            out[pts[:, 0], pts[:, 1]] = True
    return out


# -- COCO export ------------------------------------------------------------

def to_coco_rle(mask: InstanceMask) -> dict:
    """Uncompressed COCO RLE (column-major counts starting with background)."""
    bm = mask.bitmap
    return {"size": [mask.height, mask.width], "counts": list(encode_rle(bm.T))}


def from_coco_rle(rle: dict, instance_id: int = 0) -> InstanceMask:
    h, w = rle["size"]
    bm = decode_rle(rle["counts"], h, w).T
    return InstanceMask.from_bitmap(bm, instance_id)
