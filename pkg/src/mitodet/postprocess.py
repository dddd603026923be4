"""Stage-1 output handling: IoU, greedy NMS, tile planning and tile-to-global stitching."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from mitodet import kernels
from mitodet.errors import DataError

Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class Detection:
    """A scored box in image coordinates."""

    x0: float
    y0: float
    x1: float
    y1: float
    score: float
    label: str | None = None

    def __post_init__(self) -> None:
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box ({self.x0}, {self.y0}, {self.x1}, {self.y1})")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def box(self) -> Box:
        return (self.x0, self.y0, self.x1, self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)

    def translated(self, dx: float, dy: float) -> "Detection":
        return Detection(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy, self.score, self.label)


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection-over-union of two (x0, y0, x1, y1) boxes."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def nms(dets: Sequence[Detection], iou_threshold: float = 0.4) -> list[Detection]:
    """Greedy NMS: keep by descending score (ties by input index), drop IoU > threshold.

    Boxes at exactly the threshold survive. Output preserves the kept order.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError("iou_threshold must be in [0, 1]")
    if not dets:
        return []
    boxes = np.array([d.box for d in dets], dtype=np.float64)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    order = np.lexsort((np.arange(len(dets)), -scores))
    keep = kernels.nms_keep(boxes[order], iou_threshold)
    return [dets[i] for i in order[keep]]


@dataclass(frozen=True)
class Tile:
    x: int
    y: int
    size: int


@dataclass(frozen=True)
class TileGrid:
    tile_size: int
    overlap: int
    tiles: tuple[Tile, ...]


def _tile_starts(extent: int, tile_size: int, stride: int) -> list[int]:
    if extent <= tile_size:
        return [0]
    starts = list(range(0, extent - tile_size, stride))
    starts.append(extent - tile_size)
    return starts


def tile_plan(width: int, height: int, tile_size: int = 512, overlap: int = 64) -> TileGrid:
    """Cover an image with tiles at stride (tile_size - overlap).

    The last row/column is shifted inward so tiles stay in bounds; images smaller than
    tile_size get a single tile at the origin (padded downstream).
    """
    if tile_size < 1:
        raise ValueError("tile_size must be >= 1")
    if not 0 <= overlap < tile_size:
        raise ValueError("need 0 <= overlap < tile_size")
    if width < 1 or height < 1:
        raise ValueError("image extent must be positive")
    stride = tile_size - overlap
    tiles = tuple(
        Tile(x, y, tile_size)
        for y in _tile_starts(height, tile_size, stride)
        for x in _tile_starts(width, tile_size, stride)
    )
    return TileGrid(tile_size=tile_size, overlap=overlap, tiles=tiles)


def stitch(
    per_tile: Iterable[tuple[tuple[int, int], Sequence[Detection]]],
    iou_threshold: float = 0.4,
) -> list[Detection]:
    """Translate per-tile detections to global coordinates, concatenate, NMS once."""
    merged: list[Detection] = []
    for (ox, oy), dets in per_tile:
        merged.extend(d.translated(ox, oy) for d in dets)
    return nms(merged, iou_threshold)


# ---------------------------------------------------------------------------
# JSON-lines serialization of detections
# ---------------------------------------------------------------------------

def detection_to_record(image_id: str, det: Detection) -> dict:
    rec = {"image_id": image_id, "x0": det.x0, "y0": det.y0, "x1": det.x1, "y1": det.y1, "score": det.score}
    if det.label is not None:
        rec["label"] = det.label
    return rec


def detections_to_jsonl(items: Iterable[tuple[str, Detection]]) -> str:
    return "".join(json.dumps(detection_to_record(i, d), sort_keys=True) + "\n" for i, d in items)


def detections_from_jsonl(text: str) -> list[tuple[str, Detection]]:
    out: list[tuple[str, Detection]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            det = Detection(
                float(rec["x0"]),
                float(rec["y0"]),
                float(rec["x1"]),
                float(rec["y1"]),
                float(rec["score"]),
                rec.get("label"),
            )
            out.append((str(rec["image_id"]), det))
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"bad detection record on line {lineno}: {exc}") from exc
    return out
