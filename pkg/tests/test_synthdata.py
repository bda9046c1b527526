import json
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from disdet.boxes import iou, read_manifest
from disdet.synthdata import (
    CLASS_NAMES,
    DomainStyle,
    SceneSpec,
    generate,
    load_dataset,
    render_image,
    template_class_heuristic,
)


@pytest.fixture(scope="module")
def spec():
    return SceneSpec(seed=17)


class TestRenderimage:
    def test_deterministic(self, spec):
        a, ann_a = render_image(spec, DomainStyle.source(), 3)
        b, ann_b = render_image(spec, DomainStyle.source(), 3)
        assert (a == b).all()
        assert ann_a == ann_b

    def test_boxes_identical_across_styles(self, spec):
        for index in range(20):
            _, ann_s = render_image(spec, DomainStyle.source(), index)
            _, ann_t = render_image(spec, DomainStyle.target(), index)
            assert [a.box.as_tuple() for a in ann_s] == [a.box.as_tuple() for a in ann_t]
            assert [a.label for a in ann_s] == [a.label for a in ann_t]

    def test_styles_differ_in_pixels(self, spec):
        diffs = []
        for index in range(20):
            img_s, _ = render_image(spec, DomainStyle.source(), index)
            img_t, _ = render_image(spec, DomainStyle.target(), index)
            diffs.append(np.abs(img_s.astype(float) - img_t.astype(float)).mean() / 255.0)
        assert float(np.mean(diffs)) > 0.05

    def test_objects_inside_image_and_separated(self, spec):
        for index in range(50):
            _, ann = render_image(spec, DomainStyle.source(), index)
            assert 1 <= len(ann) <= 4
            for a in ann:
                assert 0 <= a.box.x_min < a.box.x_max <= spec.image_size
                assert 0 <= a.box.y_min < a.box.y_max <= spec.image_size
            for i, a in enumerate(ann):
                for b in ann[i + 1 :]:
                    assert iou(a.box, b.box) <= 0.3

    def test_class_balance(self, spec):
        counts = Counter()
        for index in range(1000):
            _, ann = render_image(spec, DomainStyle.source(), index)
            counts.update(a.label for a in ann)
        mean = sum(counts.values()) / len(CLASS_NAMES)
        for cls in range(len(CLASS_NAMES)):
            assert abs(counts[cls] - mean) / mean <= 0.2

    def test_template_heuristic_floor(self, spec):
        ok = total = 0
        for index in range(300):
            img, ann = render_image(spec, DomainStyle.source(), index)
            for a in ann:
                total += 1
                ok += template_class_heuristic(img, a.box) == a.label
        assert ok / total >= 0.99


class TestGenerate:
    def test_byte_identical_datasets(self, tmp_path):
        spec = SceneSpec(seed=5)
        a = generate(spec, DomainStyle.source(), 4, "train", tmp_path / "a")
        b = generate(spec, DomainStyle.source(), 4, "train", tmp_path / "b")
        for rel in sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file()):
            assert (a / rel).read_bytes() == (b / rel).read_bytes()

    def test_single_image_structure(self, tmp_path):
        out = generate(SceneSpec(seed=6, max_objects=1), DomainStyle.source(), 1, "train", tmp_path / "one")
        records = read_manifest(out / "annotations.jsonl")
        assert len(records) == 1
        assert len(records[0].boxes) == 1
        box = records[0].boxes[0]
        assert 0 <= box.x_min < box.x_max <= 64

    def test_target_train_is_unlabeled_with_sealed_manifest(self, tmp_path):
        out = generate(SceneSpec(seed=7), DomainStyle.target(), 3, "train", tmp_path / "t")
        public = read_manifest(out / "annotations.jsonl")
        sealed = read_manifest(out / "eval_annotations.jsonl")
        assert all(not r.boxes and not r.labels for r in public)
        assert any(r.boxes for r in sealed)
        assert [r.image_id for r in public] == [r.image_id for r in sealed]
        assert all(r.domain == 1 for r in public)

    def test_source_and_eval_manifests_are_labeled(self, tmp_path):
        out = generate(SceneSpec(seed=8), DomainStyle.target(), 3, "eval", tmp_path / "e")
        assert not (out / "eval_annotations.jsonl").exists()
        records = read_manifest(out / "annotations.jsonl")
        assert any(r.boxes for r in records)

    def test_invalid_args(self, tmp_path):
        with pytest.raises(ValueError):
            generate(SceneSpec(), DomainStyle.source(), 0, "train", tmp_path / "x")
        with pytest.raises(ValueError):
            generate(SceneSpec(), DomainStyle.source(), 1, "dev", tmp_path / "x")

    def test_load_dataset_roundtrip(self, tmp_path):
        out = generate(SceneSpec(seed=9), DomainStyle.source(), 5, "train", tmp_path / "d")
        data = load_dataset(out)
        assert len(data) == 5
        assert data.images.shape == (5, 3, 64, 64)
        assert data.images.dtype.is_floating_point is False
        assert len(data.annotations) == 5

    def test_load_sealed_preference(self, tmp_path):
        out = generate(SceneSpec(seed=10), DomainStyle.target(), 2, "train", tmp_path / "s")
        public = load_dataset(out, sealed=False)
        sealed = load_dataset(out, sealed=True)
        assert all(len(a) == 0 for a in public.annotations)
        assert any(len(a) > 0 for a in sealed.annotations)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)


class TestSceneSpecValidation:
    def test_bad_object_range(self):
        with pytest.raises(ValueError):
            SceneSpec(min_objects=0)
        with pytest.raises(ValueError):
            SceneSpec(min_objects=3, max_objects=2)

    def test_bad_size_range(self):
        with pytest.raises(ValueError):
            SceneSpec(min_size_frac=0.5, max_size_frac=0.4)
