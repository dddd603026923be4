from __future__ import annotations

import json

import numpy as np
import pytest

from mitodet.errors import DataError, ManifestError
from mitodet.ingest import (
    Annotation,
    ClassCounts,
    DatasetManifest,
    ImageRecord,
    class_counts,
    import_coco,
    load_image,
    parse_manifest,
    save_image,
    serialize_manifest,
    validate_manifest,
)

from conftest import make_rng


def doc(images=None, annotations=None, name="ds"):
    return json.dumps({"name": name, "images": images or [], "annotations": annotations or []})


IMG = {"id": "a", "path": "a.png", "width": 100, "height": 80}


class TestParse:
    def test_single_image_no_annotations(self):
        m = parse_manifest(doc([IMG]))
        assert len(m.images) == 1
        assert len(m.annotations) == 0
        assert m.images[0] == ImageRecord("a", "a.png", 100, 80, 0.25)

    def test_accepts_bytes(self):
        m = parse_manifest(doc([IMG]).encode("utf-8"))
        assert m.name == "ds"

    def test_mpp_field(self):
        m = parse_manifest(doc([dict(IMG, mpp=0.5)]))
        assert m.images[0].microns_per_pixel == 0.5

    def test_dangling_image_id_names_offender(self):
        text = doc([IMG], [{"image_id": "x9", "x": 1, "y": 1, "label": "mitotic"}])
        with pytest.raises(ManifestError) as exc:
            parse_manifest(text)
        assert "x9" in str(exc.value)

    def test_syntax_error_carries_position(self):
        with pytest.raises(ManifestError) as exc:
            parse_manifest('{"name": "x", ]')
        assert "line 1" in str(exc.value)

    def test_out_of_bounds_center(self):
        text = doc([IMG], [{"image_id": "a", "x": 100.0, "y": 1, "label": "mitotic"}])
        with pytest.raises(ManifestError) as exc:
            parse_manifest(text)
        assert "annotations[0]" in str(exc.value)

    def test_inverted_bbox(self):
        text = doc([IMG], [{"image_id": "a", "x": 5, "y": 5, "bbox": [9, 1, 2, 8], "label": "mitotic"}])
        with pytest.raises(ManifestError) as exc:
            parse_manifest(text)
        assert "inverted bbox" in str(exc.value)

    def test_center_outside_bbox(self):
        text = doc([IMG], [{"image_id": "a", "x": 50, "y": 50, "bbox": [1, 1, 10, 10], "label": "mitotic"}])
        with pytest.raises(ManifestError):
            parse_manifest(text)

    def test_duplicate_image_ids(self):
        with pytest.raises(ManifestError) as exc:
            parse_manifest(doc([IMG, IMG]))
        assert "duplicate" in str(exc.value)

    def test_unknown_label(self):
        text = doc([IMG], [{"image_id": "a", "x": 1, "y": 1, "label": "weird"}])
        with pytest.raises(ManifestError):
            parse_manifest(text)


def random_manifest(rng, n_images=3, n_annotations=20) -> DatasetManifest:
    images = tuple(
        ImageRecord(f"im{i}", f"im{i}.png", int(rng.integers(50, 200)), int(rng.integers(50, 200)),
                    float(rng.uniform(0.1, 0.5)))
        for i in range(n_images)
    )
    annotations = []
    for _ in range(n_annotations):
        rec = images[int(rng.integers(n_images))]
        x = float(rng.uniform(5, rec.width - 5))
        y = float(rng.uniform(5, rec.height - 5))
        bbox = None
        if rng.uniform() < 0.5:
            bbox = (x - 4.0, y - 3.0, x + 5.0, y + 2.0)
        label = "mitotic" if rng.uniform() < 0.5 else "imposter"
        annotations.append(Annotation(rec.id, x, y, label, bbox))
    return DatasetManifest("rand", images, tuple(annotations))


def test_roundtrip_field_for_field():
    rng = make_rng(42)
    for _ in range(20):
        m = random_manifest(rng)
        assert parse_manifest(serialize_manifest(m)) == m


def test_valid_manifest_zero_errors():
    rng = make_rng(1)
    assert validate_manifest(random_manifest(rng)) == []


class TestClassCounts:
    def test_empty(self):
        m = parse_manifest(doc([IMG]))
        assert class_counts(m) == ClassCounts(0, 0, 0)

    def test_totals_match_annotation_count(self):
        rng = make_rng(3)
        for _ in range(10):
            m = random_manifest(rng, n_annotations=int(rng.integers(0, 40)))
            c = class_counts(m)
            assert c.total_annotations == c.mitotic + c.imposter == len(m.annotations)


class TestLoadImage:
    def test_white_png(self, tmp_path):
        arr = np.full((2, 2, 3), 255, dtype=np.uint8)
        save_image(arr, tmp_path / "w.png")
        rec = ImageRecord("w", "w.png", 2, 2)
        got = load_image(rec, tmp_path)
        np.testing.assert_array_equal(got, arr)

    def test_dimension_mismatch(self, tmp_path):
        save_image(np.zeros((256, 256, 3), dtype=np.uint8), tmp_path / "x.png")
        rec = ImageRecord("x", "x.png", 512, 512)
        with pytest.raises(DataError) as exc:
            load_image(rec, tmp_path)
        assert "512x512" in str(exc.value)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_image(ImageRecord("x", "nope.png", 4, 4), tmp_path)

    def test_decode_failure(self, tmp_path):
        (tmp_path / "bad.png").write_bytes(b"not a png")
        with pytest.raises(DataError):
            load_image(ImageRecord("bad", "bad.png", 4, 4), tmp_path)

    def test_save_load_bit_exact(self, tmp_path):
        rng = make_rng(7)
        arr = rng.integers(0, 256, (33, 47, 3), dtype=np.uint8)
        save_image(arr, tmp_path / "r.png")
        got = load_image(ImageRecord("r", "r.png", 47, 33), tmp_path)
        np.testing.assert_array_equal(got, arr)

    def test_tiff_roundtrip(self, tmp_path):
        rng = make_rng(8)
        arr = rng.integers(0, 256, (20, 30, 3), dtype=np.uint8)
        save_image(arr, tmp_path / "t.tiff")
        got = load_image(ImageRecord("t", "t.tiff", 30, 20), tmp_path)
        np.testing.assert_array_equal(got, arr)


class TestCocoImport:
    def test_category_mapping_and_centers(self):
        coco = json.dumps(
            {
                "images": [{"id": 1, "file_name": "a.png", "width": 100, "height": 100}],
                "annotations": [
                    {"image_id": 1, "category_id": 1, "bbox": [10, 20, 30, 40]},
                    {"image_id": 1, "category_id": 2, "bbox": [50, 50, 10, 10]},
                ],
            }
        )
        m = import_coco(coco)
        assert class_counts(m) == ClassCounts(1, 1, 2)
        ann = m.annotations[0]
        assert (ann.x, ann.y) == (25.0, 40.0)
        assert ann.bbox == (10.0, 20.0, 40.0, 60.0)

    def test_unmapped_category_rejected(self):
        coco = json.dumps(
            {
                "images": [{"id": 1, "file_name": "a.png", "width": 10, "height": 10}],
                "annotations": [{"image_id": 1, "category_id": 9, "bbox": [1, 1, 2, 2]}],
            }
        )
        with pytest.raises(ManifestError):
            import_coco(coco)

    def test_custom_map(self):
        coco = json.dumps(
            {
                "images": [{"id": 1, "file_name": "a.png", "width": 10, "height": 10}],
                "annotations": [{"image_id": 1, "category_id": 7, "bbox": [1, 1, 2, 2]}],
            }
        )
        m = import_coco(coco, {7: "imposter"})
        assert m.annotations[0].label == "imposter"


def test_point_annotation_box_fallback():
    ann = Annotation("a", 100.0, 60.0, "mitotic")
    assert ann.box() == (75.0, 35.0, 125.0, 85.0)
    assert ann.box(side=10) == (95.0, 55.0, 105.0, 65.0)
