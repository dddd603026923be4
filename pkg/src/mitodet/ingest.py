"""Dataset manifests: parsing, validation, class statistics and image IO.

The canonical on-disk format is a single JSON document:

    {"name": str,
     "images": [{"id": str, "path": str, "width": int, "height": int, "mpp": float?}],
     "annotations": [{"image_id": str, "x": float, "y": float,
                      "bbox": [x0, y0, x1, y1]?, "label": "mitotic" | "imposter"}]}

COCO-style annotation files are converted once by ``import_coco`` instead of being
parsed everywhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from mitodet.errors import DataError, ManifestError

MITOTIC = "mitotic"
IMPOSTER = "imposter"
LABELS = (MITOTIC, IMPOSTER)

DEFAULT_MPP = 0.25  # microns per pixel at a standard 40x scan
DEFAULT_BOX_SIDE = 50.0  # square box synthesized around point annotations


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: str
    width: int
    height: int
    microns_per_pixel: float = DEFAULT_MPP


@dataclass(frozen=True)
class Annotation:
    image_id: str
    x: float
    y: float
    label: str
    bbox: tuple[float, float, float, float] | None = None

    def box(self, side: float = DEFAULT_BOX_SIDE) -> tuple[float, float, float, float]:
        """The annotation's bbox, or a square of the given side centered on the point."""
        if self.bbox is not None:
            return self.bbox
        h = side / 2.0
        return (self.x - h, self.y - h, self.x + h, self.y + h)


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    images: tuple[ImageRecord, ...]
    annotations: tuple[Annotation, ...]

    def image_by_id(self, image_id: str) -> ImageRecord:
        for rec in self.images:
            if rec.id == image_id:
                return rec
        raise KeyError(image_id)


@dataclass(frozen=True)
class ClassCounts:
    mitotic: int
    imposter: int
    total_annotations: int


def class_counts(manifest: DatasetManifest) -> ClassCounts:
    """Partition annotations by label; total always equals the annotation count."""
    mitotic = sum(1 for a in manifest.annotations if a.label == MITOTIC)
    return ClassCounts(mitotic, len(manifest.annotations) - mitotic, len(manifest.annotations))


def validate_manifest(manifest: DatasetManifest) -> list[str]:
    """All semantic problems, one message per offending record; empty when valid."""
    errors: list[str] = []
    by_id: dict[str, ImageRecord] = {}
    for i, rec in enumerate(manifest.images):
        if rec.id in by_id:
            errors.append(f"images[{i}]: duplicate image id {rec.id!r}")
            continue
        if rec.width < 1 or rec.height < 1:
            errors.append(f"images[{i}] (id {rec.id!r}): non-positive dimensions {rec.width}x{rec.height}")
        if rec.microns_per_pixel <= 0:
            errors.append(f"images[{i}] (id {rec.id!r}): non-positive mpp {rec.microns_per_pixel}")
        by_id[rec.id] = rec
    for i, ann in enumerate(manifest.annotations):
        where = f"annotations[{i}]"
        if ann.label not in LABELS:
            errors.append(f"{where}: unknown label {ann.label!r}")
        rec = by_id.get(ann.image_id)
        if rec is None:
            errors.append(f"{where}: references unknown image id {ann.image_id!r}")
            continue
        if not (0 <= ann.x < rec.width and 0 <= ann.y < rec.height):
            errors.append(
                f"{where}: center ({ann.x}, {ann.y}) outside image {rec.id!r} bounds {rec.width}x{rec.height}"
            )
        if ann.bbox is not None:
            x0, y0, x1, y1 = ann.bbox
            if not (x0 < x1 and y0 < y1):
                errors.append(f"{where}: inverted bbox {ann.bbox}")
            elif not (x0 <= ann.x <= x1 and y0 <= ann.y <= y1):
                errors.append(f"{where}: center ({ann.x}, {ann.y}) outside its bbox {ann.bbox}")
    return errors


def _build_manifest(doc: dict) -> DatasetManifest:
    if not isinstance(doc, dict):
        raise ManifestError("manifest root must be a JSON object")
    images = []
    for i, rec in enumerate(doc.get("images", [])):
        try:
            images.append(
                ImageRecord(
                    id=str(rec["id"]),
                    path=str(rec["path"]),
                    width=int(rec["width"]),
                    height=int(rec["height"]),
                    microns_per_pixel=float(rec.get("mpp", DEFAULT_MPP)),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"images[{i}]: {exc!r}") from exc
    annotations = []
    for i, rec in enumerate(doc.get("annotations", [])):
        try:
            bbox = rec.get("bbox")
            annotations.append(
                Annotation(
                    image_id=str(rec["image_id"]),
                    x=float(rec["x"]),
                    y=float(rec["y"]),
                    label=str(rec["label"]),
                    bbox=tuple(float(v) for v in bbox) if bbox is not None else None,
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"annotations[{i}]: {exc!r}") from exc
    return DatasetManifest(name=str(doc.get("name", "")), images=tuple(images), annotations=tuple(annotations))


def parse_manifest(text: str | bytes) -> DatasetManifest:
    """Parse and fully validate a manifest document.

    Raises ManifestError with line/column on malformed JSON, or with one message per
    offending record on semantic errors.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    manifest = _build_manifest(doc)
    errors = validate_manifest(manifest)
    if errors:
        raise ManifestError(f"manifest {manifest.name!r} failed validation", errors)
    return manifest


def serialize_manifest(manifest: DatasetManifest) -> str:
    doc = {
        "name": manifest.name,
        "images": [
            {"id": r.id, "path": r.path, "width": r.width, "height": r.height, "mpp": r.microns_per_pixel}
            for r in manifest.images
        ],
        "annotations": [
            {
                "image_id": a.image_id,
                "x": a.x,
                "y": a.y,
                "label": a.label,
                **({"bbox": list(a.bbox)} if a.bbox is not None else {}),
            }
            for a in manifest.annotations
        ],
    }
    return json.dumps(doc, indent=2) + "\n"


def load_manifest(path: str | Path) -> DatasetManifest:
    return parse_manifest(Path(path).read_text(encoding="utf-8"))


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    Path(path).write_text(serialize_manifest(manifest), encoding="utf-8")


# ---------------------------------------------------------------------------
# Image IO
# ---------------------------------------------------------------------------

def load_image(record: ImageRecord, root: str | Path | None = None) -> np.ndarray:
    """Load the record's image as an immutable (H, W, 3) uint8 array.

    Dimensions are checked against the manifest record.
    """
    path = Path(record.path)
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    if not path.exists():
        raise DataError(f"image file missing for {record.id!r}: {path}")
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode image for {record.id!r}: {path} ({exc})") from exc
    h, w = arr.shape[:2]
    if (w, h) != (record.width, record.height):
        raise DataError(
            f"image {record.id!r} is {w}x{h} but manifest says {record.width}x{record.height}"
        )
    arr.setflags(write=False)
    return arr


def save_image(raster: np.ndarray, path: str | Path) -> None:
    """Write an (H, W, 3) uint8 raster as PNG (or TIFF by extension)."""
    if raster.dtype != np.uint8 or raster.ndim != 3 or raster.shape[2] != 3:
        raise ValueError("expected (H, W, 3) uint8 raster")
    Image.fromarray(raster, mode="RGB").save(path)


# ---------------------------------------------------------------------------
# COCO-subset import
# ---------------------------------------------------------------------------

DEFAULT_CATEGORY_MAP = {1: MITOTIC, 2: IMPOSTER}


def import_coco(
    text: str | bytes,
    category_map: dict[int, str] | None = None,
    name: str = "imported",
) -> DatasetManifest:
    """Convert a COCO-style document (images[] + annotations[]) to a manifest.

    COCO boxes are [x, y, w, h]; annotation centers are the box centers. Unknown
    category ids are rejected.
    """
    cmap = category_map if category_map is not None else DEFAULT_CATEGORY_MAP
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"malformed COCO JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    images = []
    for i, rec in enumerate(doc.get("images", [])):
        try:
            images.append(
                ImageRecord(
                    id=str(rec["id"]),
                    path=str(rec.get("file_name", rec.get("path", ""))),
                    width=int(rec["width"]),
                    height=int(rec["height"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"COCO images[{i}]: {exc!r}") from exc
    annotations = []
    for i, rec in enumerate(doc.get("annotations", [])):
        try:
            cat = int(rec["category_id"])
            if cat not in cmap:
                raise ManifestError(f"COCO annotations[{i}]: unmapped category_id {cat}")
            x, y, w, h = (float(v) for v in rec["bbox"])
            annotations.append(
                Annotation(
                    image_id=str(rec["image_id"]),
                    x=x + w / 2.0,
                    y=y + h / 2.0,
                    label=cmap[cat],
                    bbox=(x, y, x + w, y + h),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"COCO annotations[{i}]: {exc!r}") from exc
    manifest = DatasetManifest(name=name, images=tuple(images), annotations=tuple(annotations))
    errors = validate_manifest(manifest)
    if errors:
        raise ManifestError("imported COCO document failed validation", errors)
    return manifest
