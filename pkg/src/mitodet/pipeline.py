"""End-to-end orchestration: tile -> stage-1 detector -> stitch -> ensemble -> evaluate.

The built-in stage-1 detector is a classical dark-blob connected-component detector, so
desk-scale runs are fully deterministic; an external detector subprocess slot speaks the
same length-prefixed JSON framing as the scorer protocol, with box-list responses.
"""

from __future__ import annotations

import base64
import json
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from mitodet import PROTOCOL_VERSION, ensemble, wire
from mitodet.ensemble import EnsembleConfig
from mitodet.errors import DataError, ProtocolError
from mitodet.evaluation import EvaluationReport, MatchConfig, evaluate_run
from mitodet.ingest import (
    IMPOSTER,
    MITOTIC,
    Annotation,
    DatasetManifest,
    ImageRecord,
    load_image,
    save_image,
    save_manifest,
)
from mitodet.kernels import component_stats, label_components, luma
from mitodet.postprocess import Detection, Tile, detections_from_jsonl, detections_to_jsonl, stitch, tile_plan
from mitodet.sampler import extract_patch

BLOB = "blob"
EXTERNAL = "external"


@dataclass(frozen=True)
class BlobDetectorParams:
    intensity_threshold: int = 200
    min_area: int = 40
    max_area: int = 50000
    box_size: int = 50

    def __post_init__(self) -> None:
        if not 0 <= self.intensity_threshold <= 255:
            raise ValueError("intensity_threshold must be in [0, 255]")
        if self.min_area > self.max_area:
            raise ValueError("min_area must be <= max_area")
        if self.box_size < 1:
            raise ValueError("box_size must be >= 1")


@dataclass(frozen=True)
class DetectorSpec:
    kind: str = BLOB
    blob: BlobDetectorParams = field(default_factory=BlobDetectorParams)
    argv: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in (BLOB, EXTERNAL):
            raise ValueError(f"unknown detector kind {self.kind!r}")
        if self.kind == EXTERNAL and not self.argv:
            raise ValueError("external detector needs a command line")


@dataclass(frozen=True)
class PipelineConfig:
    tile_size: int = 512
    overlap: int = 64
    nms_iou: float = 0.4
    detector: DetectorSpec = field(default_factory=DetectorSpec)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.overlap < self.tile_size:
            raise ValueError("need 0 <= overlap < tile_size")
        if not 0.0 <= self.nms_iou <= 1.0:
            raise ValueError("nms_iou must be in [0, 1]")

    def to_config_doc(self) -> dict:
        """The resolved configuration in the config-file schema, so a written
        run_config.json can be fed straight back through --config."""
        detector: dict = {"kind": self.detector.kind}
        if self.detector.kind == BLOB:
            b = self.detector.blob
            detector.update(
                intensity_threshold=b.intensity_threshold,
                min_area=b.min_area,
                max_area=b.max_area,
                box_size=b.box_size,
            )
        else:
            detector["argv"] = list(self.detector.argv)
        return {
            "pipeline": {
                "tile_size": self.tile_size,
                "overlap": self.overlap,
                "nms_iou": self.nms_iou,
                "seed": self.seed,
                "detector": detector,
            },
            "ensemble": {
                "patch_size": self.ensemble.patch_size,
                "decision_threshold": self.ensemble.decision_threshold,
                "batch_size": self.ensemble.batch_size,
                "scorers": [
                    {"name": s.name, "kind": s.kind, **({"argv": list(s.argv)} if s.argv else {})}
                    for s in self.ensemble.scorers
                ],
            },
        }


def match_config_doc(cfg: MatchConfig) -> dict:
    doc: dict = {"strategy": cfg.strategy}
    if cfg.radius_px is not None:
        doc["radius_px"] = cfg.radius_px
    if cfg.radius_microns is not None:
        doc["radius_microns"] = cfg.radius_microns
    return doc


# ---------------------------------------------------------------------------
# Dark-blob stage-1 detector
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlobComponent:
    centroid: tuple[float, float]
    area: int
    mean_luma: float
    extent: tuple[int, int, int, int]  # min_x, min_y, max_x, max_y in tile coords


def blob_components(tile: np.ndarray, params: BlobDetectorParams) -> list[BlobComponent]:
    """Area-filtered 8-connected components of pixels darker than the threshold."""
    mask = luma(tile) < params.intensity_threshold
    labels, n = label_components(mask.astype(np.uint8))
    if n == 0:
        return []
    stats = component_stats(labels, n, tile)
    comps = []
    for k in range(n):
        area = int(stats["area"][k])
        if not params.min_area <= area <= params.max_area:
            continue
        mean_r = stats["sum_r"][k] / area
        mean_g = stats["sum_g"][k] / area
        mean_b = stats["sum_b"][k] / area
        mean_luma = 0.299 * mean_r + 0.587 * mean_g + 0.114 * mean_b
        comps.append(
            BlobComponent(
                centroid=(stats["sum_x"][k] / area, stats["sum_y"][k] / area),
                area=area,
                mean_luma=float(mean_luma),
                extent=(
                    int(stats["min_x"][k]),
                    int(stats["min_y"][k]),
                    int(stats["max_x"][k]),
                    int(stats["max_y"][k]),
                ),
            )
        )
    comps.sort(key=lambda c: (c.centroid[1], c.centroid[0]))
    return comps


def _component_detection(comp: BlobComponent, box_size: int) -> Detection:
    cx, cy = comp.centroid
    h = box_size / 2.0
    score = 1.0 - comp.mean_luma / 255.0
    return Detection(cx - h, cy - h, cx + h, cy + h, score)


def blob_detect(tile: np.ndarray, params: BlobDetectorParams) -> list[Detection]:
    """Fixed-size boxes centered on dark-component centroids; score = 1 - mean luma/255."""
    return [_component_detection(c, params.box_size) for c in blob_components(tile, params)]


# ---------------------------------------------------------------------------
# External stage-1 detector protocol client
# ---------------------------------------------------------------------------

class ExternalDetectorClient:
    """Same framing as the scorer protocol; `detect` requests return box lists."""

    def __init__(self, argv: Sequence[str], tile_size: int):
        self.tile_size = tile_size
        self._next_id = 0
        try:
            self._proc = subprocess.Popen(list(argv), stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        except OSError as exc:
            raise ProtocolError(f"detector: cannot start {argv}: {exc}") from exc
        try:
            wire.write_frame(
                self._proc.stdin,
                {"type": "hello", "protocol": PROTOCOL_VERSION, "patch_size": tile_size, "channels": 3},
            )
            reply = wire.read_frame(self._proc.stdout)
        except (ProtocolError, OSError) as exc:
            self._kill()
            raise ProtocolError(f"detector: handshake failed: {exc}") from exc
        if reply.get("type") != "ready":
            self._kill()
            raise ProtocolError(f"detector: bad handshake reply {reply}")

    def detect(self, tiles: Sequence[np.ndarray]) -> list[list[Detection]]:
        req_id = self._next_id
        self._next_id += 1
        patches = [base64.b64encode(t.tobytes()).decode("ascii") for t in tiles]
        try:
            wire.write_frame(self._proc.stdin, {"type": "detect", "id": req_id, "patches": patches})
            reply = wire.read_frame(self._proc.stdout)
        except (ProtocolError, OSError) as exc:
            raise ProtocolError(f"detector: batch {req_id} failed: {exc}") from exc
        if reply.get("type") == "error":
            raise ProtocolError(f"detector: batch {req_id}: {reply.get('message')}")
        if reply.get("type") != "detections" or reply.get("id") != req_id:
            raise ProtocolError(f"detector: batch {req_id}: unexpected reply {reply}")
        groups = reply.get("detections")
        if not isinstance(groups, list) or len(groups) != len(tiles):
            raise ProtocolError(f"detector: batch {req_id}: detection count mismatch")
        out = []
        for group in groups:
            dets = []
            for rec in group:
                try:
                    dets.append(
                        Detection(
                            float(rec["x0"]),
                            float(rec["y0"]),
                            float(rec["x1"]),
                            float(rec["y1"]),
                            float(rec["score"]),
                        )
                    )
                except (KeyError, TypeError, ValueError) as exc:
                    raise ProtocolError(f"detector: batch {req_id}: bad box {rec}: {exc}") from exc
            out.append(dets)
        return out

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                wire.write_frame(self._proc.stdin, {"type": "bye"})
                self._proc.stdin.close()
                self._proc.wait(timeout=10)
            except (ProtocolError, OSError, subprocess.TimeoutExpired):
                self._kill()

    def _kill(self) -> None:
        if self._proc.poll() is None:
            self._proc.kill()
            self._proc.wait()


# ---------------------------------------------------------------------------
# Stage 1 over a whole image
# ---------------------------------------------------------------------------

def _tile_detections_blob(
    raster: np.ndarray,
    tile: Tile,
    params: BlobDetectorParams,
    width: int,
    height: int,
) -> list[Detection]:
    patch = extract_patch(raster, (tile.x, tile.y), tile.size, pad="reflect")
    dets = []
    for comp in blob_components(patch, params):
        min_x, min_y, max_x, max_y = comp.extent
        # drop components cut by an interior tile edge; they are whole in another tile
        if min_x == 0 and tile.x > 0:
            continue
        if min_y == 0 and tile.y > 0:
            continue
        if max_x == tile.size - 1 and tile.x + tile.size < width:
            continue
        if max_y == tile.size - 1 and tile.y + tile.size < height:
            continue
        dets.append(_component_detection(comp, params.box_size))
    return dets


def detect_image(
    raster: np.ndarray,
    cfg: PipelineConfig,
    jobs: int = 1,
    detector_client: ExternalDetectorClient | None = None,
) -> list[Detection]:
    """Tile the raster, detect per tile, stitch with one global NMS.

    Detections whose center falls outside the raster (possible only through reflect
    padding of images smaller than the tile) are dropped after stitching.
    """
    height, width = raster.shape[:2]
    grid = tile_plan(width, height, cfg.tile_size, cfg.overlap)
    if cfg.detector.kind == BLOB:
        params = cfg.detector.blob

        def work(tile: Tile) -> list[Detection]:
            return _tile_detections_blob(raster, tile, params, width, height)

        if jobs > 1 and len(grid.tiles) > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                per_tile_dets = list(pool.map(work, grid.tiles))
        else:
            per_tile_dets = [work(t) for t in grid.tiles]
    else:
        own = detector_client is None
        client = detector_client or ExternalDetectorClient(cfg.detector.argv, cfg.tile_size)
        try:
            tiles = [extract_patch(raster, (t.x, t.y), t.size, pad="reflect") for t in grid.tiles]
            per_tile_dets = client.detect(tiles)
        finally:
            if own:
                client.close()
    merged = stitch(
        [((t.x, t.y), dets) for t, dets in zip(grid.tiles, per_tile_dets)],
        cfg.nms_iou,
    )
    return [d for d in merged if 0 <= d.center[0] < width and 0 <= d.center[1] < height]


# ---------------------------------------------------------------------------
# Full pipeline run
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunResult:
    predictions: list[tuple[str, Detection]]
    report: EvaluationReport | None


def _candidate_records(image_id: str, dets, probs, threshold) -> list[dict]:
    recs = []
    for det, p in zip(dets, probs):
        recs.append(
            {
                "image_id": image_id,
                "x0": det.x0,
                "y0": det.y0,
                "x1": det.x1,
                "y1": det.y1,
                "detector_score": det.score,
                "probs": [float(p[0]), float(p[1])],
                "kept": bool(p[1] >= threshold),
            }
        )
    return recs


def run_pipeline(
    manifest: DatasetManifest,
    cfg: PipelineConfig,
    out_dir: str | Path,
    root: str | Path | None = None,
    jobs: int = 1,
    match_cfg: MatchConfig | None = None,
) -> RunResult:
    """Run stage 1 + stage 2 over every manifest image, persisting all intermediates.

    Output layout under out_dir: predictions.jsonl, stage1/<image_id>.jsonl,
    probs/<image_id>.jsonl, report.json (when the manifest has annotations) and
    run_config.json.
    """
    out = Path(out_dir)
    (out / "stage1").mkdir(parents=True, exist_ok=True)
    (out / "probs").mkdir(parents=True, exist_ok=True)
    doc = cfg.to_config_doc()
    if match_cfg is not None:
        doc["match"] = match_config_doc(match_cfg)
    (out / "run_config.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    scorers = [ensemble.open_scorer(h, cfg.ensemble.patch_size) for h in cfg.ensemble.scorers]
    detector_client = None
    if cfg.detector.kind == EXTERNAL:
        detector_client = ExternalDetectorClient(cfg.detector.argv, cfg.tile_size)
    predictions: list[tuple[str, Detection]] = []
    try:
        for rec in manifest.images:
            try:
                raster = load_image(rec, root)
                stage1 = detect_image(raster, cfg, jobs=jobs, detector_client=detector_client)
                (out / "stage1" / f"{rec.id}.jsonl").write_text(
                    detections_to_jsonl((rec.id, d) for d in stage1), encoding="utf-8"
                )
                probs = ensemble.score_candidates(raster, stage1, cfg.ensemble, scorers)
                threshold = cfg.ensemble.decision_threshold
                cand_lines = "".join(
                    json.dumps(r, sort_keys=True) + "\n"
                    for r in _candidate_records(rec.id, stage1, probs, threshold)
                )
                (out / "probs" / f"{rec.id}.jsonl").write_text(cand_lines, encoding="utf-8")
                for det, p in zip(stage1, probs):
                    if p[1] >= threshold:
                        predictions.append(
                            (rec.id, Detection(det.x0, det.y0, det.x1, det.y1, float(p[1]), MITOTIC))
                        )
            except (DataError, ProtocolError) as exc:
                raise type(exc)(f"image {rec.id!r}: {exc}") from exc
    finally:
        for scorer in scorers:
            scorer.close()
        if detector_client is not None:
            detector_client.close()

    (out / "predictions.jsonl").write_text(detections_to_jsonl(predictions), encoding="utf-8")
    report = None
    if manifest.annotations:
        report = evaluate_run(predictions, manifest, match_cfg or MatchConfig())
        (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    return RunResult(predictions=predictions, report=report)


def classify_stage(
    manifest: DatasetManifest,
    stage1_predictions: Sequence[tuple[str, Detection]],
    cfg: PipelineConfig,
    out_dir: str | Path,
    root: str | Path | None = None,
    match_cfg: MatchConfig | None = None,
) -> RunResult:
    """Stage 2 on persisted stage-1 output; byte-equivalent to the fused run."""
    out = Path(out_dir)
    (out / "probs").mkdir(parents=True, exist_ok=True)
    by_image: dict[str, list[Detection]] = {rec.id: [] for rec in manifest.images}
    for image_id, det in stage1_predictions:
        if image_id not in by_image:
            raise DataError(f"stage-1 prediction references unknown image id {image_id!r}")
        by_image[image_id].append(det)

    scorers = [ensemble.open_scorer(h, cfg.ensemble.patch_size) for h in cfg.ensemble.scorers]
    predictions: list[tuple[str, Detection]] = []
    try:
        for rec in manifest.images:
            raster = load_image(rec, root)
            stage1 = by_image[rec.id]
            probs = ensemble.score_candidates(raster, stage1, cfg.ensemble, scorers)
            threshold = cfg.ensemble.decision_threshold
            cand_lines = "".join(
                json.dumps(r, sort_keys=True) + "\n"
                for r in _candidate_records(rec.id, stage1, probs, threshold)
            )
            (out / "probs" / f"{rec.id}.jsonl").write_text(cand_lines, encoding="utf-8")
            for det, p in zip(stage1, probs):
                if p[1] >= threshold:
                    predictions.append(
                        (rec.id, Detection(det.x0, det.y0, det.x1, det.y1, float(p[1]), MITOTIC))
                    )
    finally:
        for scorer in scorers:
            scorer.close()

    (out / "predictions.jsonl").write_text(detections_to_jsonl(predictions), encoding="utf-8")
    report = None
    if manifest.annotations:
        report = evaluate_run(predictions, manifest, match_cfg or MatchConfig())
        (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    return RunResult(predictions=predictions, report=report)


def read_stage1_dir(stage1_dir: str | Path) -> list[tuple[str, Detection]]:
    out: list[tuple[str, Detection]] = []
    for path in sorted(Path(stage1_dir).glob("*.jsonl")):
        out.extend(detections_from_jsonl(path.read_text(encoding="utf-8")))
    return out


# ---------------------------------------------------------------------------
# Synthetic slide generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    width: int = 1024
    height: int = 1024
    n_mitoses: int = 10
    n_imposters: int = 5
    seed: int = 7
    radius_range: tuple[int, int] = (54, 60)
    min_separation: int = 192
    margin: int = 70
    background: tuple[int, int, int] = (236, 210, 223)
    mitosis_color: tuple[int, int, int] = (15, 12, 18)
    imposter_color: tuple[int, int, int] = (135, 125, 140)
    max_attempts: int = 20000

    def __post_init__(self) -> None:
        if self.n_mitoses < 0 or self.n_imposters < 0:
            raise ValueError("figure counts must be >= 0")
        if self.margin <= self.radius_range[1]:
            raise ValueError("margin must exceed the largest figure radius")
        if 2 * self.margin >= min(self.width, self.height):
            raise ValueError("image too small for the margin")


def gen_synthetic(spec: SyntheticSpec) -> tuple[np.ndarray, DatasetManifest]:
    """Light-pink slide with dark elliptical mitoses and medium-gray imposters.

    Figure centers are rejection-sampled to at least min_separation apart and at least
    margin from the border; deterministic per seed.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    total = spec.n_mitoses + spec.n_imposters
    centers: list[tuple[int, int]] = []
    attempts = 0
    min_sep_sq = spec.min_separation**2
    while len(centers) < total:
        attempts += 1
        if attempts > spec.max_attempts:
            raise DataError(
                f"could not place {total} figures at separation {spec.min_separation} "
                f"within {spec.max_attempts} attempts"
            )
        cx = int(rng.integers(spec.margin, spec.width - spec.margin))
        cy = int(rng.integers(spec.margin, spec.height - spec.margin))
        if all((cx - ox) ** 2 + (cy - oy) ** 2 >= min_sep_sq for ox, oy in centers):
            centers.append((cx, cy))

    raster = np.empty((spec.height, spec.width, 3), dtype=np.uint8)
    raster[:, :] = spec.background
    annotations = []
    lo, hi = spec.radius_range
    for k, (cx, cy) in enumerate(centers):
        a = int(rng.integers(lo, hi + 1))
        b = int(rng.integers(lo, hi + 1))
        is_mitosis = k < spec.n_mitoses
        color = spec.mitosis_color if is_mitosis else spec.imposter_color
        ys = np.arange(cy - b, cy + b + 1)
        xs = np.arange(cx - a, cx + a + 1)
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        mask = ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
        region = raster[cy - b : cy + b + 1, cx - a : cx + a + 1]
        region[mask] = color
        annotations.append(
            Annotation(
                image_id="synthetic",
                x=float(cx),
                y=float(cy),
                label=MITOTIC if is_mitosis else IMPOSTER,
            )
        )

    manifest = DatasetManifest(
        name=f"synthetic-seed{spec.seed}",
        images=(
            ImageRecord(id="synthetic", path="image.png", width=spec.width, height=spec.height),
        ),
        annotations=tuple(annotations),
    )
    return raster, manifest


def save_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> tuple[Path, Path]:
    """Write image.png and manifest.json for a synthetic slide; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    raster, manifest = gen_synthetic(spec)
    image_path = out / "image.png"
    manifest_path = out / "manifest.json"
    save_image(raster, image_path)
    save_manifest(manifest, manifest_path)
    return image_path, manifest_path
