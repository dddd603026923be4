"""Point-based detection scoring: radius matching, confusion counts, P/R/F1.

Predicted boxes are reduced to their centers; a prediction matches a ground-truth
mitosis when their distance is within the radius (7.5 um by default, converted through
the image's microns-per-pixel). Pooled metrics sum tp/fp/fn across images.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from mitodet.errors import DataError
from mitodet.ingest import MITOTIC, DatasetManifest
from mitodet.postprocess import Detection

GREEDY = "greedy"
HUNGARIAN = "hungarian"  # maximum-cardinality oracle, used to cross-check greedy

Point = tuple[float, float]


@dataclass(frozen=True)
class MatchConfig:
    radius_px: float | None = None
    radius_microns: float | None = 7.5
    strategy: str = GREEDY

    def __post_init__(self) -> None:
        if self.radius_px is None and self.radius_microns is None:
            raise ValueError("need radius_px or radius_microns")
        if self.radius_px is not None and self.radius_px <= 0:
            raise ValueError("radius_px must be > 0")
        if self.radius_microns is not None and self.radius_microns <= 0:
            raise ValueError("radius_microns must be > 0")
        if self.strategy not in (GREEDY, HUNGARIAN):
            raise ValueError(f"unknown matching strategy {self.strategy!r}")

    def resolve_radius(self, microns_per_pixel: float) -> float:
        """Radius in pixels; an explicit radius_px wins over the micron conversion."""
        if self.radius_px is not None:
            return self.radius_px
        return self.radius_microns / microns_per_pixel


@dataclass(frozen=True)
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: tuple[tuple[int, int, float], ...]  # (pred index, gt index, distance)


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float


def f1(precision: float, recall: float) -> float:
    """Harmonic mean; 0 when both are 0."""
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def metrics_from_counts(tp: int, fp: int, fn: int) -> Metrics:
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be >= 0")
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    return Metrics(tp, fp, fn, precision, recall, f1(precision, recall))


def _greedy_match(preds: Sequence[Point], gts: Sequence[Point], radius: float):
    candidates = []
    for i, (px, py) in enumerate(preds):
        for j, (gx, gy) in enumerate(gts):
            d = math.hypot(px - gx, py - gy)
            if d <= radius:
                candidates.append((d, i, j))
    candidates.sort()
    used_pred: set[int] = set()
    used_gt: set[int] = set()
    pairs = []
    for d, i, j in candidates:
        if i in used_pred or j in used_gt:
            continue
        used_pred.add(i)
        used_gt.add(j)
        pairs.append((i, j, d))
    return pairs


def _hungarian_match(preds: Sequence[Point], gts: Sequence[Point], radius: float):
    from scipy.optimize import linear_sum_assignment

    if not preds or not gts:
        return []
    dist = np.array([[math.hypot(p[0] - g[0], p[1] - g[1]) for g in gts] for p in preds])
    # out-of-radius pairs get a sentinel big enough that the assignment always prefers
    # one more in-radius pair over any combination of in-radius distances
    sentinel = radius * (min(len(preds), len(gts)) + 1.0) + 1.0
    cost = np.where(dist <= radius, dist, sentinel)
    rows, cols = linear_sum_assignment(cost)
    return [(int(i), int(j), float(dist[i, j])) for i, j in zip(rows, cols) if dist[i, j] <= radius]


def match_detections(
    preds: Sequence[tuple[Point, float]],
    gts: Sequence[Point],
    radius_px: float,
    strategy: str = GREEDY,
) -> MatchResult:
    """Match scored predicted points to ground-truth points within the radius.

    Greedy: candidate pairs sorted by (distance, pred index, gt index) and accepted
    while both endpoints are free. Hungarian: maximum-cardinality matching with minimal
    total distance, kept as an independent oracle.
    """
    points = [p for p, _ in preds]
    if strategy == GREEDY:
        pairs = _greedy_match(points, gts, radius_px)
    elif strategy == HUNGARIAN:
        pairs = _hungarian_match(points, gts, radius_px)
    else:
        raise ValueError(f"unknown matching strategy {strategy!r}")
    tp = len(pairs)
    return MatchResult(tp=tp, fp=len(preds) - tp, fn=len(gts) - tp, pairs=tuple(pairs))


@dataclass(frozen=True)
class EvaluationReport:
    per_image: dict[str, Metrics]
    pooled: Metrics
    radius_px_by_image: dict[str, float]
    strategy: str

    def to_json(self) -> str:
        def as_dict(m: Metrics) -> dict:
            return {
                "tp": m.tp,
                "fp": m.fp,
                "fn": m.fn,
                "precision": m.precision,
                "recall": m.recall,
                "f1": m.f1,
            }

        doc = {
            "per_image": {i: as_dict(m) for i, m in sorted(self.per_image.items())},
            "pooled": as_dict(self.pooled),
            "config": {
                "radius_px": {i: r for i, r in sorted(self.radius_px_by_image.items())},
                "strategy": self.strategy,
            },
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def evaluate_run(
    predictions: Sequence[tuple[str, Detection]],
    manifest: DatasetManifest,
    cfg: MatchConfig = MatchConfig(),
) -> EvaluationReport:
    """Per-image matching plus pooled metrics from summed confusion counts."""
    ids = {rec.id for rec in manifest.images}
    preds_by_image: dict[str, list[tuple[Point, float]]] = {i: [] for i in ids}
    for image_id, det in predictions:
        if image_id not in ids:
            raise DataError(f"prediction references unknown image id {image_id!r}")
        preds_by_image[image_id].append((det.center, det.score))
    gts_by_image: dict[str, list[Point]] = {i: [] for i in ids}
    for ann in manifest.annotations:
        if ann.label == MITOTIC:
            gts_by_image[ann.image_id].append((ann.x, ann.y))

    per_image: dict[str, Metrics] = {}
    radius_by_image: dict[str, float] = {}
    tp = fp = fn = 0
    for rec in manifest.images:
        radius = cfg.resolve_radius(rec.microns_per_pixel)
        radius_by_image[rec.id] = radius
        result = match_detections(preds_by_image[rec.id], gts_by_image[rec.id], radius, cfg.strategy)
        per_image[rec.id] = metrics_from_counts(result.tp, result.fp, result.fn)
        tp += result.tp
        fp += result.fp
        fn += result.fn
    return EvaluationReport(
        per_image=per_image,
        pooled=metrics_from_counts(tp, fp, fn),
        radius_px_by_image=radius_by_image,
        strategy=cfg.strategy,
    )
