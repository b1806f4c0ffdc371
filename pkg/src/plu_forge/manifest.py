"""
On-disk formats: JSON manifests, feature-vector dumps and paletted contour PNGs.

Manifests are canonical: fixed key order, floats rounded to 9 significant
digits, one trailing newline. Writes go to a temp file that is renamed into
place, so readers never see a partial file.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .masks import InstanceMask, MaskError, Scene, validate_runs
from .pseudo_labels import CorrectionRecord, Provenance
from .synthesis import ContourImage, N_CATEGORIES

FORMAT_VERSION = "plu-forge/1"
FVEC_MAGIC = b"FVEC"

# index 0 black, then one colour per appearance category
PALETTE = [(0, 0, 0), (255, 0, 0), (0, 255, 0), (0, 0, 255), (255, 255, 0)]


class FormatError(ValueError):
    """Invalid file contents. ``code`` is a short machine-readable tag."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class ManifestEntry:
    scene: Scene
    provenance: Optional[tuple[Provenance, ...]] = None
    correction_log: Optional[tuple[CorrectionRecord, ...]] = None


@dataclass(frozen=True)
class Manifest:
    entries: tuple[ManifestEntry, ...] = ()
    root: Optional[Path] = None

    @property
    def scenes(self) -> list[Scene]:
        return [e.scene for e in self.entries]

    def resolve(self, scene: Scene) -> Path:
        p = Path(scene.image_path)
        return p if p.is_absolute() or self.root is None else self.root / p

    @classmethod
    def from_scenes(cls, scenes: Sequence[Scene], root: Optional[Path] = None) -> "Manifest":
        return cls(tuple(ManifestEntry(s) for s in scenes), root)


def _num(x: float):
    x = float(x)
    if not np.isfinite(x):
        raise FormatError("value", f"non-finite number {x}")
    return float(f"{x:.9g}")


def _scene_record(entry: ManifestEntry) -> dict:
    s = entry.scene
    annotations = []
    for i, m in enumerate(s.instances):
        a = {"instance_id": m.instance_id, "rle": list(m.runs)}
        if s.scores is not None:
            a["score"] = _num(s.scores[i])
        if s.categories is not None:
            a["category"] = int(s.categories[i])
        if s.severe_overlap_flags is not None:
            a["severe_overlap"] = bool(s.severe_overlap_flags[i])
        annotations.append(a)
    rec = {"path": s.image_path, "width": s.width, "height": s.height, "annotations": annotations}
    if entry.provenance is not None:
        rec["provenance"] = [
            {"instance_id": m.instance_id, "source_index": p.source_index, "box_score": _num(p.box_score)}
            for m, p in zip(s.instances, entry.provenance)
        ]
    if entry.correction_log is not None:
        rec["correction_log"] = []
        for r in entry.correction_log:
            item = {"original_id": r.original_id, "replacement_ids": list(r.replacement_ids)}
            if r.reason is not None:
                item["reason"] = r.reason
            rec["correction_log"].append(item)
    return rec


def dumps_manifest(manifest: Manifest) -> str:
    doc = {"version": FORMAT_VERSION, "images": [_scene_record(e) for e in manifest.entries]}
    return json.dumps(doc, indent=1, ensure_ascii=True) + "\n"


def _require(rec: dict, key: str, where: str):
    if key not in rec:
        raise FormatError("manifest", f"{where}: missing '{key}'")
    return rec[key]


def _optional_column(annotations: list, key: str, where: str, cast):
    present = [key in a for a in annotations]
    if not any(present):
        return None
    if not all(present):
        raise FormatError("manifest", f"{where}: '{key}' given for some annotations only")
    return tuple(cast(a[key]) for a in annotations)


def _category(v) -> int:
    v = int(v)
    if not 1 <= v <= N_CATEGORIES:
        raise FormatError("manifest", f"category {v} outside 1..{N_CATEGORIES}")
    return v


def _parse_entry(rec: dict, idx: int) -> ManifestEntry:
    where = f"images[{idx}]"
    if not isinstance(rec, dict):
        raise FormatError("manifest", f"{where}: expected an object")
    path = _require(rec, "path", where)
    width, height = int(_require(rec, "width", where)), int(_require(rec, "height", where))
    anns = _require(rec, "annotations", where)
    masks = []
    for j, a in enumerate(anns):
        runs = tuple(int(r) for r in _require(a, "rle", f"{where}.annotations[{j}]"))
        validate_runs(runs, width, height)
        masks.append(InstanceMask(width, height, runs, int(_require(a, "instance_id", where))))
    scene = Scene(path, width, height, masks,
                  severe_overlap_flags=_optional_column(anns, "severe_overlap", where, bool),
                  scores=_optional_column(anns, "score", where, float),
                  categories=_optional_column(anns, "category", where, _category))
    prov = log = None
    if "provenance" in rec:
        items = rec["provenance"]
        if [p.get("instance_id") for p in items] != scene.ids:
            raise FormatError("manifest", f"{where}: provenance does not follow annotation order")
        prov = tuple(Provenance(int(p["source_index"]), float(p["box_score"])) for p in items)
    if "correction_log" in rec:
        log = tuple(CorrectionRecord(int(r["original_id"]), tuple(int(x) for x in r["replacement_ids"]),
                                     r.get("reason")) for r in rec["correction_log"])
    return ManifestEntry(scene, prov, log)


def loads_manifest(text: str, root: Optional[Path] = None, check_files: bool = True) -> Manifest:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError("manifest", f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError("manifest", "top level must be an object")
    version = doc.get("version")
    if version != FORMAT_VERSION:
        raise FormatError("schema-version", f"expected version {FORMAT_VERSION!r}, got {version!r}")
    try:
        entries = tuple(_parse_entry(rec, i) for i, rec in enumerate(_require(doc, "images", "manifest")))
    except (MaskError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError("manifest", str(exc)) from exc
    manifest = Manifest(entries, root)
    if check_files:
        for e in entries:
            if not manifest.resolve(e.scene).is_file():
                raise FormatError("missing-file", f"image {e.scene.image_path!r} not found")
    return manifest


def load_manifest(path, check_files: bool = True) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError("io", f"cannot read {path}: {exc}") from exc
    return loads_manifest(text, path.parent, check_files)


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_manifest(path, manifest: Manifest) -> None:
    atomic_write(path, dumps_manifest(manifest).encode("ascii"))


# -- feature dumps -------------------------------------------------------------

def write_fvec(path, features: np.ndarray) -> None:
    """``FVEC`` magic, u32 count, u32 dim, then count*dim little-endian float32."""
    f = np.asarray(features, dtype="<f4")
    if f.ndim != 2:
        raise ValueError("features must be a 2-D array")
    atomic_write(path, FVEC_MAGIC + struct.pack("<II", *f.shape) + f.tobytes())


def read_fvec(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != FVEC_MAGIC:
        raise FormatError("fvec", f"{path}: bad magic")
    count, dim = struct.unpack("<II", data[4:12])
    if len(data) != 12 + 4 * count * dim:
        raise FormatError("fvec", f"{path}: expected {count}x{dim} floats, file size {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(count, dim).astype(float)


# -- images --------------------------------------------------------------------

def _png_bytes(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def write_gray(path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image, dtype=float)), 0, 255).astype(np.uint8)
    atomic_write(path, _png_bytes(Image.fromarray(arr)))


def read_gray(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    except OSError as exc:
        raise FormatError("io", f"cannot read image {path}: {exc}") from exc


def write_contours(path, contours: ContourImage) -> None:
    img = Image.fromarray(np.ascontiguousarray(contours.pixels))
    img.putpalette([c for rgb in PALETTE for c in rgb])
    atomic_write(path, _png_bytes(img))


def read_contours(path) -> ContourImage:
    with Image.open(path) as im:
        if im.mode != "P":
            raise FormatError("contours", f"{path}: expected a paletted image, got mode {im.mode}")
        return ContourImage(np.asarray(im, dtype=np.uint8))
