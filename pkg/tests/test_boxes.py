import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from disdet.boxes import (
    AnnotatedBox,
    BoundingBox,
    DegenerateBoxError,
    ImageRecord,
    ProposalSet,
    box_iou_matrix,
    clip_box,
    iou,
    read_manifest,
    write_manifest,
)


def finite_boxes():
    coord = st.floats(-100, 100, allow_nan=False, allow_infinity=False)
    extent = st.floats(0.1, 50)

    def build(x, y, w, h):
        return BoundingBox(x, y, x + w, y + h)

    return st.builds(build, coord, coord, extent, extent)


class TestBoundingBox:
    def test_rejects_empty(self):
        with pytest.raises(DegenerateBoxError):
            BoundingBox(1, 0, 1, 2)
        with pytest.raises(DegenerateBoxError):
            BoundingBox(0, 3, 2, 3)
        with pytest.raises(DegenerateBoxError):
            BoundingBox(2, 0, 1, 2)

    def test_rejects_non_finite(self):
        with pytest.raises(DegenerateBoxError):
            BoundingBox(0, 0, math.inf, 1)
        with pytest.raises(DegenerateBoxError):
            BoundingBox(0, math.nan, 1, 1)

    def test_area(self):
        assert BoundingBox(0, 0, 2, 3).area == 6.0

    def test_annotated_label_check(self):
        with pytest.raises(ValueError):
            AnnotatedBox(BoundingBox(0, 0, 1, 1), -1)


class TestIou:
    def test_identical_boxes(self):
        b = BoundingBox(3.5, 1.0, 7.25, 9.0)
        assert iou(b, b) == 1.0

    def test_partial_overlap_manual_arithmetic(self):
        # oracle by hand: intersection (1,1)-(2,2) has area 1;
        # union = 4 + 4 - 1 = 7
        a = BoundingBox(0, 0, 2, 2)
        b = BoundingBox(1, 1, 3, 3)
        expected = 1.0 / 7.0
        assert iou(a, b) == pytest.approx(expected, abs=1e-12)

    def test_disjoint(self):
        assert iou(BoundingBox(0, 0, 1, 1), BoundingBox(2, 2, 3, 3)) == 0.0

    @settings(max_examples=200, deadline=None)
    @given(finite_boxes(), finite_boxes())
    def test_symmetry(self, a, b):
        assert iou(a, b) == pytest.approx(iou(b, a), abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(finite_boxes())
    def test_self_iou_is_one(self, a):
        assert iou(a, a) == 1.0

    @settings(max_examples=200, deadline=None)
    @given(finite_boxes(), finite_boxes())
    def test_bounded(self, a, b):
        value = iou(a, b)
        assert 0.0 <= value <= 1.0

    def test_matrix_matches_scalar(self):
        boxes_a = [BoundingBox(0, 0, 2, 2), BoundingBox(1, 1, 3, 3)]
        boxes_b = [BoundingBox(0, 0, 2, 2), BoundingBox(2, 2, 3, 3), BoundingBox(0.5, 0.5, 1.5, 1.5)]
        ta = torch.tensor([b.as_tuple() for b in boxes_a], dtype=torch.float64)
        tb = torch.tensor([b.as_tuple() for b in boxes_b], dtype=torch.float64)
        matrix = box_iou_matrix(ta, tb)
        for i, a in enumerate(boxes_a):
            for j, b in enumerate(boxes_b):
                assert float(matrix[i, j]) == pytest.approx(iou(a, b), abs=1e-12)


class TestClipBox:
    def test_clamp_at_zero(self):
        assert clip_box(BoundingBox(-1, -1, 2, 2), 4, 4).as_tuple() == (0, 0, 2, 2)

    def test_clamp_at_bound(self):
        assert clip_box(BoundingBox(1, 1, 9, 9), 4, 4).as_tuple() == (1, 1, 4, 4)

    def test_fully_outside_is_degenerate(self):
        with pytest.raises(DegenerateBoxError):
            clip_box(BoundingBox(5, 5, 9, 9), 4, 4)

    def test_invalid_bounds(self):
        with pytest.raises(ValueError):
            clip_box(BoundingBox(0, 0, 1, 1), 0, 4)


class TestProposalSet:
    def test_length_and_split(self):
        props = ProposalSet(
            torch.tensor([[0.0, 0, 2, 2], [1, 1, 3, 3], [0, 0, 1, 1]]),
            torch.tensor([0.9, 0.8, 0.7]),
            torch.tensor([0, 1, 0]),
        )
        assert len(props) == 3
        assert len(props.for_image(0)) == 2
        assert len(props.for_image(1)) == 1

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            ProposalSet(torch.zeros((2, 3)), torch.zeros(2), torch.zeros(2, dtype=torch.long))
        with pytest.raises(ValueError):
            ProposalSet(torch.zeros((2, 4)), torch.zeros(3), torch.zeros(2, dtype=torch.long))

    def test_empty(self):
        assert len(ProposalSet.empty()) == 0


class TestManifest:
    def test_roundtrip(self, tmp_path):
        records = [
            ImageRecord(
                image_id="img_000",
                boxes=(BoundingBox(1.5, 2.5, 10.0, 12.0),),
                labels=(2,),
                domain=0,
            ),
            ImageRecord(image_id="img_001", boxes=(), labels=(), domain=1),
        ]
        path = tmp_path / "annotations.jsonl"
        write_manifest(path, records)
        loaded = read_manifest(path)
        assert loaded == records

    def test_annotated_view(self):
        record = ImageRecord("x", (BoundingBox(0, 0, 1, 1),), (1,), 0)
        (a,) = record.annotated()
        assert a.label == 1 and a.box.as_tuple() == (0, 0, 1, 1)
