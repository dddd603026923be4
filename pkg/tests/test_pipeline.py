from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np
import pytest

from mitodet.ensemble import EnsembleConfig
from mitodet.errors import DataError
from mitodet.evaluation import MatchConfig, evaluate_run
from mitodet.ingest import load_manifest
from mitodet.pipeline import (
    BlobDetectorParams,
    DetectorSpec,
    PipelineConfig,
    SyntheticSpec,
    blob_detect,
    classify_stage,
    detect_image,
    gen_synthetic,
    read_stage1_dir,
    run_pipeline,
    save_synthetic,
)
from mitodet.postprocess import detections_from_jsonl

from conftest import make_rng

STUB_DETECTOR = str(Path(__file__).parent / "stub_detector.py")

FIXTURE_CFG = PipelineConfig(tile_size=512, overlap=128, seed=7)


class TestBlobDetect:
    def test_blank_tile(self):
        tile = np.full((64, 64, 3), 255, dtype=np.uint8)
        assert blob_detect(tile, BlobDetectorParams()) == []

    def test_black_square_centered_score_one(self):
        tile = np.full((64, 64, 3), 255, dtype=np.uint8)
        tile[29:35, 29:35] = 0  # 6x6 black square
        dets = blob_detect(tile, BlobDetectorParams(min_area=1, max_area=100, box_size=50))
        assert len(dets) == 1
        d = dets[0]
        assert d.center == (31.5, 31.5)
        assert d.score == 1.0
        assert (d.x1 - d.x0, d.y1 - d.y0) == (50.0, 50.0)

    def test_two_separated_blobs(self):
        tile = np.full((128, 128, 3), 255, dtype=np.uint8)
        tile[10:20, 10:20] = 0
        tile[90:100, 90:100] = 50
        dets = blob_detect(tile, BlobDetectorParams(min_area=1, max_area=1000))
        assert len(dets) == 2
        assert dets[0].score > dets[1].score  # darker blob scores higher

    def test_area_filter(self):
        tile = np.full((64, 64, 3), 255, dtype=np.uint8)
        tile[10:12, 10:12] = 0  # area 4
        tile[40:60, 30:60] = 0  # area 600
        dets = blob_detect(tile, BlobDetectorParams(min_area=10, max_area=500))
        assert dets == []

    def test_threshold_boundary(self):
        tile = np.full((32, 32, 3), 255, dtype=np.uint8)
        tile[4:10, 4:10] = 150
        params = BlobDetectorParams(intensity_threshold=140, min_area=1)
        assert blob_detect(tile, params) == []
        params = BlobDetectorParams(intensity_threshold=160, min_area=1)
        assert len(blob_detect(tile, params)) == 1

    def test_deterministic_order(self):
        rng = make_rng(0)
        tile = np.full((256, 256, 3), 255, dtype=np.uint8)
        for x, y in rng.integers(10, 230, (8, 2)):
            tile[y : y + 8, x : x + 8] = 30
        a = blob_detect(tile, BlobDetectorParams(min_area=1))
        b = blob_detect(tile, BlobDetectorParams(min_area=1))
        assert a == b


class TestGenSynthetic:
    def test_zero_mitoses(self):
        _, manifest = gen_synthetic(SyntheticSpec(n_mitoses=0, n_imposters=3, seed=1))
        assert all(a.label == "imposter" for a in manifest.annotations)

    def test_deterministic(self, tmp_path):
        spec = SyntheticSpec(seed=7)
        save_synthetic(spec, tmp_path / "a")
        save_synthetic(spec, tmp_path / "b")
        assert (tmp_path / "a" / "image.png").read_bytes() == (tmp_path / "b" / "image.png").read_bytes()
        assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()

    def test_separation_property(self):
        _, manifest = gen_synthetic(SyntheticSpec(seed=3))
        pts = [(a.x, a.y) for a in manifest.annotations]
        for i, a in enumerate(pts):
            for b in pts[:i]:
                assert (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2 >= 192**2

    def test_blob_detect_recovers_all_figures(self):
        raster, manifest = gen_synthetic(SyntheticSpec(seed=5))
        dets = blob_detect(raster, BlobDetectorParams())
        assert len(dets) == len(manifest.annotations)
        # every annotation (mitotic or not) yields one blob; mitotic recall is 1
        report = evaluate_run([("synthetic", d) for d in dets], manifest, MatchConfig())
        assert report.pooled.recall == 1.0

    def test_placement_cap(self):
        with pytest.raises(DataError):
            gen_synthetic(SyntheticSpec(width=400, height=400, n_mitoses=20, n_imposters=20, seed=0,
                                        min_separation=300, margin=61, max_attempts=500))


class TestDetectImage:
    def test_fixture_stage1_finds_all(self, synthetic_dir, synthetic_manifest):
        from mitodet.ingest import load_image

        raster = load_image(synthetic_manifest.images[0], synthetic_dir)
        dets = detect_image(raster, FIXTURE_CFG)
        assert len(dets) == 15

    def test_jobs_do_not_change_results(self, synthetic_dir, synthetic_manifest):
        from mitodet.ingest import load_image

        raster = load_image(synthetic_manifest.images[0], synthetic_dir)
        assert detect_image(raster, FIXTURE_CFG, jobs=1) == detect_image(raster, FIXTURE_CFG, jobs=4)

    def test_external_detector_stub(self):
        tile = np.full((700, 700, 3), 255, dtype=np.uint8)
        tile[100:140, 200:240] = 0
        cfg = PipelineConfig(
            tile_size=512,
            overlap=64,
            detector=DetectorSpec(kind="external", argv=(sys.executable, STUB_DETECTOR)),
        )
        dets = detect_image(tile, cfg)
        assert len(dets) == 1
        assert dets[0].center == (220.0, 120.0)


class TestRunPipeline:
    def test_synthetic_fixture_perfect_scores(self, synthetic_dir, synthetic_manifest, tmp_path):
        result = run_pipeline(synthetic_manifest, FIXTURE_CFG, tmp_path / "out", root=synthetic_dir)
        pooled = result.report.pooled
        assert (pooled.precision, pooled.recall, pooled.f1) == (1.0, 1.0, 1.0)
        assert len(result.predictions) == 10
        out = tmp_path / "out"
        for name in ("predictions.jsonl", "report.json", "run_config.json"):
            assert (out / name).exists()
        assert (out / "stage1" / "synthetic.jsonl").exists()
        assert (out / "probs" / "synthetic.jsonl").exists()

    def test_high_threshold_drops_everything(self, synthetic_dir, synthetic_manifest, tmp_path):
        cfg = PipelineConfig(
            tile_size=512,
            overlap=128,
            seed=7,
            ensemble=EnsembleConfig(decision_threshold=0.99),
        )
        result = run_pipeline(synthetic_manifest, cfg, tmp_path / "out", root=synthetic_dir)
        assert result.predictions == []
        assert result.report.pooled.recall == 0.0

    def test_empty_manifest(self, tmp_path):
        from mitodet.ingest import DatasetManifest

        manifest = DatasetManifest("empty", (), ())
        result = run_pipeline(manifest, FIXTURE_CFG, tmp_path / "out")
        assert result.predictions == []
        assert result.report is None
        assert (tmp_path / "out" / "predictions.jsonl").read_text() == ""

    def test_stage2_rerun_matches_fused_run(self, synthetic_dir, synthetic_manifest, tmp_path):
        fused = tmp_path / "fused"
        run_pipeline(synthetic_manifest, FIXTURE_CFG, fused, root=synthetic_dir)
        stage1 = read_stage1_dir(fused / "stage1")
        split = tmp_path / "split"
        classify_stage(synthetic_manifest, stage1, FIXTURE_CFG, split, root=synthetic_dir)
        assert (split / "predictions.jsonl").read_bytes() == (fused / "predictions.jsonl").read_bytes()
        assert (split / "probs" / "synthetic.jsonl").read_bytes() == (
            fused / "probs" / "synthetic.jsonl"
        ).read_bytes()
        assert (split / "report.json").read_bytes() == (fused / "report.json").read_bytes()

    def test_predictions_roundtrip_through_evaluate(self, synthetic_dir, synthetic_manifest, tmp_path):
        out = tmp_path / "out"
        result = run_pipeline(synthetic_manifest, FIXTURE_CFG, out, root=synthetic_dir)
        loaded = detections_from_jsonl((out / "predictions.jsonl").read_text())
        report = evaluate_run(loaded, synthetic_manifest)
        assert report.pooled == result.report.pooled

    def test_byte_identical_rerun_and_jobs(self, synthetic_dir, synthetic_manifest, tmp_path):
        outs = []
        for name, jobs in (("r1", 1), ("r2", 1), ("r4", 4)):
            out = tmp_path / name
            run_pipeline(synthetic_manifest, FIXTURE_CFG, out, root=synthetic_dir, jobs=jobs)
            outs.append(out)
        for rel in (
            "predictions.jsonl",
            "stage1/synthetic.jsonl",
            "probs/synthetic.jsonl",
            "report.json",
            "run_config.json",
        ):
            first = (outs[0] / rel).read_bytes()
            assert all((o / rel).read_bytes() == first for o in outs[1:]), rel


class TestFilterMonotonicity:
    @pytest.mark.parametrize("threshold", [0.1, 0.3, 0.5, 0.7, 0.9])
    def test_filter_never_hurts_precision_or_helps_recall(
        self, adversarial_dir, threshold, tmp_path
    ):
        manifest = load_manifest(adversarial_dir / "manifest.json")
        cfg = PipelineConfig(
            tile_size=512,
            overlap=192,
            seed=1,
            ensemble=EnsembleConfig(decision_threshold=threshold),
        )
        out = tmp_path / f"thr{threshold}"
        result = run_pipeline(manifest, cfg, out, root=adversarial_dir)
        stage1 = detections_from_jsonl((out / "stage1" / "synthetic.jsonl").read_text())
        before = evaluate_run(stage1, manifest).pooled
        after = result.report.pooled
        assert before.recall >= 0.95
        assert after.precision >= before.precision
        assert after.recall <= before.recall
