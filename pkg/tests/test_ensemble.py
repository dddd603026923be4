from __future__ import annotations

import math
import sys
from pathlib import Path

import numpy as np
import pytest

from mitodet.ensemble import (
    EnsembleConfig,
    ExternalScorerClient,
    ScorerHandle,
    average_probs,
    classify_candidates,
    extract_candidate_patch,
    mock_intensity_score,
    open_scorer,
    score_batch,
    score_candidates,
    softmax,
    validate_probs,
)
from mitodet.errors import ProtocolError
from mitodet.postprocess import Detection

from conftest import make_rng

STUB = str(Path(__file__).parent / "stub_scorer.py")


def stub_handle(mode: str, *extra: str) -> ScorerHandle:
    return ScorerHandle(name=mode, kind="external", argv=(sys.executable, STUB, mode, *extra))


class FixedScorer:
    """Test double returning one prescribed probability vector for every patch."""

    def __init__(self, probs, name="fixed"):
        self.name = name
        self._probs = np.asarray(probs, dtype=np.float64)

    def score_batch(self, patches):
        return [self._probs.copy() for _ in patches]

    def close(self):
        pass


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5])

    def test_closed_form(self):
        np.testing.assert_allclose(softmax([math.log(2), 0.0]), [2 / 3, 1 / 3], atol=1e-12)

    def test_no_overflow(self):
        p = softmax([1000.0, 0.0])
        assert p[0] == pytest.approx(1.0)
        assert np.isfinite(p).all()

    def test_temperature_preserves_argmax(self):
        rng = make_rng(0)
        for _ in range(50):
            z = rng.normal(size=4)
            for t in (0.1, 1.0, 4.0, 50.0):
                assert np.argmax(softmax(z, t)) == np.argmax(z)

    def test_strictly_positive(self):
        assert (softmax([30.0, -30.0]) > 0).all()

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            softmax([np.inf, 0.0])
        with pytest.raises(ValueError):
            softmax([0.0, 1.0], temperature=0.0)


class TestAverageProbs:
    def test_idempotent_on_copies(self):
        p = np.array([0.2, 0.8])
        np.testing.assert_allclose(average_probs([p, p, p]), p)

    def test_opposites(self):
        np.testing.assert_allclose(average_probs([np.array([1.0, 0.0]), np.array([0.0, 1.0])]), [0.5, 0.5])

    def test_three_way_mean(self):
        probs = [np.array([0.9, 0.1]), np.array([0.6, 0.4]), np.array([0.3, 0.7])]
        np.testing.assert_allclose(average_probs(probs), [0.6, 0.4], atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            average_probs([])

    def test_stays_on_simplex(self):
        rng = make_rng(1)
        for _ in range(50):
            probs = [softmax(rng.normal(size=2)) for _ in range(int(rng.integers(1, 5)))]
            assert average_probs(probs).sum() == pytest.approx(1.0, abs=1e-9)


class TestValidateProbs:
    def test_renormalizes_tiny_drift(self):
        p = validate_probs([0.35000004, 0.65000003])
        assert p.sum() == pytest.approx(1.0, abs=1e-15)

    def test_rejects_large_drift(self):
        with pytest.raises(ProtocolError):
            validate_probs([0.7, 0.7])

    def test_rejects_negative(self):
        with pytest.raises(ProtocolError):
            validate_probs([-0.1, 1.1])

    def test_rejects_wrong_shape(self):
        with pytest.raises(ProtocolError):
            validate_probs([0.2, 0.3, 0.5])


class TestCandidatePatch:
    def test_centered_origin(self):
        rng = make_rng(2)
        raster = rng.integers(0, 256, (300, 300, 3), dtype=np.uint8)
        det = Detection(36, 36, 164, 164, 0.5)  # center (100, 100)
        patch = extract_candidate_patch(raster, det, 128)
        np.testing.assert_array_equal(patch, raster[36:164, 36:164])

    def test_border_reflects_to_full_size(self):
        rng = make_rng(3)
        raster = rng.integers(0, 256, (200, 200, 3), dtype=np.uint8)
        det = Detection(5, 5, 15, 15, 0.5)  # center (10, 10)
        patch = extract_candidate_patch(raster, det, 128)
        assert patch.shape == (128, 128, 3)

    def test_degenerate_thin_box(self):
        raster = np.zeros((200, 200, 3), dtype=np.uint8)
        det = Detection(70, 70, 71, 71, 0.5)
        assert extract_candidate_patch(raster, det, 128).shape == (128, 128, 3)


class TestMockIntensity:
    def test_black(self):
        np.testing.assert_allclose(mock_intensity_score(np.zeros((4, 4, 3), np.uint8)), [0.0, 1.0])

    def test_white(self):
        np.testing.assert_allclose(mock_intensity_score(np.full((4, 4, 3), 255, np.uint8)), [1.0, 0.0])

    def test_mid_gray_51(self):
        p = mock_intensity_score(np.full((4, 4, 3), 51, np.uint8))
        np.testing.assert_allclose(p, [0.2, 0.8])


class TestClassifyCandidates:
    def raster(self):
        r = np.full((400, 400, 3), 255, dtype=np.uint8)
        r[80:220, 80:220] = 0  # dark square dominating a 128px patch at its center
        return r

    def test_empty_input(self):
        assert classify_candidates(self.raster(), [], EnsembleConfig()) == []

    def test_dark_candidate_kept(self):
        raster = np.zeros((300, 300, 3), dtype=np.uint8)
        det = Detection(120, 120, 180, 180, 0.3)
        kept = classify_candidates(raster, [det], EnsembleConfig())
        assert len(kept) == 1
        assert kept[0].score == 1.0  # rescored with the mean mitotic probability

    def test_mean_below_threshold_dropped(self):
        scorers = [FixedScorer([0.9, 0.1]), FixedScorer([0.4, 0.6])]
        det = Detection(50, 50, 100, 100, 0.9)
        kept = classify_candidates(self.raster(), [det], EnsembleConfig(), scorers)
        assert kept == []  # mean mitotic 0.35 < 0.5

    def test_order_and_identity_preserved(self):
        raster = self.raster()
        dets = [
            Detection(110, 110, 170, 170, 0.9),  # dark -> kept
            Detection(300, 300, 360, 360, 0.8),  # white -> dropped
            Detection(105, 105, 175, 175, 0.7),  # dark -> kept
        ]
        kept = classify_candidates(raster, dets, EnsembleConfig())
        assert [k.box for k in kept] == [dets[0].box, dets[2].box]

    def test_identical_scorers_equal_single(self):
        raster = self.raster()
        dets = [Detection(110, 110, 170, 170, 0.9), Detection(200, 200, 260, 260, 0.8)]
        one = score_candidates(raster, dets, EnsembleConfig(scorers=(ScorerHandle("m"),)))
        three = score_candidates(
            raster, dets, EnsembleConfig(scorers=(ScorerHandle("a"), ScorerHandle("b"), ScorerHandle("c")))
        )
        np.testing.assert_array_equal(one, three)

    def test_threshold_monotonicity(self):
        raster = self.raster()
        rng = make_rng(5)
        dets = [
            Detection(float(x), float(y), float(x + 40), float(y + 40), 0.5)
            for x, y in rng.integers(0, 350, (20, 2))
        ]
        counts = []
        for thr in (0.1, 0.3, 0.5, 0.7, 0.9):
            cfg = EnsembleConfig(decision_threshold=thr)
            counts.append(len(classify_candidates(raster, dets, cfg)))
        assert counts == sorted(counts, reverse=True)


class TestExternalScorerProtocol:
    def patches(self, n, value=51):
        return [np.full((128, 128, 3), value, dtype=np.uint8) for _ in range(n)]

    def test_intensity_stub_matches_mock(self):
        scorer = open_scorer(stub_handle("intensity"), 128)
        try:
            got = score_batch(scorer, self.patches(3))
        finally:
            scorer.close()
        want = mock_intensity_score(self.patches(1)[0])
        for p in got:
            np.testing.assert_array_equal(p, want)

    def test_echo_fixture(self, tmp_path):
        import hashlib
        import json

        rng = make_rng(9)
        patches = [rng.integers(0, 256, (128, 128, 3), dtype=np.uint8) for _ in range(3)]
        entries = {
            hashlib.sha256(p.tobytes()).hexdigest(): [round(0.1 * (i + 1), 3), round(1 - 0.1 * (i + 1), 3)]
            for i, p in enumerate(patches)
        }
        fixture = tmp_path / "fixture.json"
        fixture.write_text(json.dumps({"default": [0.5, 0.5], "entries": entries}))
        scorer = open_scorer(stub_handle("echo", str(fixture)), 128)
        try:
            got = score_batch(scorer, patches)
        finally:
            scorer.close()
        for i, p in enumerate(got):
            np.testing.assert_allclose(p, entries[hashlib.sha256(patches[i].tobytes()).hexdigest()])

    def test_shape_mismatch_raises(self):
        scorer = open_scorer(stub_handle("badcount"), 128)
        try:
            with pytest.raises(ProtocolError, match="probs for"):
                score_batch(scorer, self.patches(2))
        finally:
            scorer.close()

    def test_bad_simplex_raises(self):
        scorer = open_scorer(stub_handle("badsum"), 128)
        try:
            with pytest.raises(ProtocolError):
                score_batch(scorer, self.patches(1))
        finally:
            scorer.close()

    def test_drifted_probs_renormalized(self):
        scorer = open_scorer(stub_handle("drift"), 128)
        try:
            (p,) = score_batch(scorer, self.patches(1))
        finally:
            scorer.close()
        assert p.sum() == pytest.approx(1.0, abs=1e-15)

    def test_error_frame_aborts_with_scorer_name(self):
        scorer = open_scorer(stub_handle("error"), 128)
        try:
            with pytest.raises(ProtocolError, match="error"):
                score_batch(scorer, self.patches(1))
        finally:
            scorer.close()

    def test_missing_executable(self):
        with pytest.raises(ProtocolError):
            ExternalScorerClient(ScorerHandle("gone", "external", ("/nonexistent/bin",)), 128)
