import torch
import torch.nn as nn
import pytest

from disdet.boxes import AnnotatedBox, BoundingBox, ProposalSet, iou
from disdet.network import (
    PARAMETER_GROUPS,
    DisentangledDetector,
    ModelConfig,
    anchor_grid,
    decode_deltas,
    encode_deltas,
    grad_reverse,
    nms,
    roi_align,
)


@pytest.fixture()
def model():
    torch.manual_seed(0)
    return DisentangledDetector(ModelConfig())


def single_box_proposals(box, batch_index=0):
    return ProposalSet(
        torch.tensor([box], dtype=torch.float64),
        torch.ones(1, dtype=torch.float64),
        torch.tensor([batch_index]),
    )


class TestForward:
    def test_first_layer_shapes(self, model):
        images = torch.randn(2, 3, 64, 64)
        state = model.forward_first_layer(images)
        for fmap in (state.f_b1, state.f_di1, state.f_ds1, state.f1):
            assert fmap.shape == (2, 64, 16, 16)

    def test_first_layer_additive_identity_at_init(self, model):
        # zero-initialized invariant-branch final layer: f1 == f_b1
        images = torch.randn(2, 3, 64, 64)
        state = model.forward_first_layer(images)
        assert torch.equal(state.f1, state.f_b1)
        assert torch.equal(state.f_di1, torch.zeros_like(state.f_di1))

    def test_sum_identity_after_training_step(self, model):
        # f1 - f_b1 = f_di1 for arbitrary parameters, up to float rounding
        for p in model.e_dir1.parameters():
            nn.init.normal_(p, std=0.1)
        state = model.forward_first_layer(torch.randn(2, 3, 64, 64))
        residual = state.f1 - state.f_b1 - state.f_di1
        assert residual.abs().max() < 1e-5

    def test_second_layer_shapes(self, model):
        state = model.forward_maps(torch.randn(2, 3, 64, 64))
        for fmap in (state.f_b2, state.f_di2, state.f_ds2):
            assert fmap.shape == (2, 128, 8, 8)

    def test_determinism(self, model):
        images = torch.randn(2, 3, 64, 64)
        a = model.forward_maps(images)
        b = model.forward_maps(images)
        assert torch.equal(a.f_di2, b.f_di2)
        assert torch.equal(a.f_ds1, b.f_ds1)

    def test_branch_extractors_distinct(self, model):
        for p in model.e_dir2.parameters():
            nn.init.normal_(p, std=0.1)
        for p in model.e_dsr2.parameters():
            nn.init.normal_(p, std=0.1)
        state = model.forward_maps(torch.randn(1, 3, 64, 64))
        assert not torch.equal(state.f_di2, state.f_ds2)

    def test_empty_batch_rejected(self, model):
        with pytest.raises(ValueError):
            model.forward_first_layer(torch.zeros(0, 3, 64, 64))

    def test_first_layer_disabled(self):
        torch.manual_seed(0)
        model = DisentangledDetector(ModelConfig(first_layer_enabled=False))
        state = model.forward_maps(torch.randn(1, 3, 64, 64))
        assert state.f_di1 is None and state.f_ds1 is None
        assert torch.equal(state.f1, state.f_b1)
        assert state.f_di2 is not None


class TestParameterGroups:
    def test_every_parameter_in_exactly_one_group(self, model):
        seen = {}
        for name in PARAMETER_GROUPS:
            for p in model.parameter_group(name):
                assert id(p) not in seen, f"{name} shares params with {seen.get(id(p))}"
                seen[id(p)] = name
        assert len(seen) == len(list(model.parameters()))

    def test_unknown_group(self, model):
        with pytest.raises(KeyError):
            model.parameter_group("nope")

    def test_frozen_group_unchanged_by_step(self, model):
        frozen = [p.detach().clone() for p in model.parameter_group("e_dsr1")]
        opt = torch.optim.SGD(list(model.parameter_group("e_b1")), lr=0.1, momentum=0.9)
        loss = model.forward_first_layer(torch.randn(2, 3, 64, 64)).f1.square().mean()
        loss.backward()
        opt.step()
        for before, after in zip(frozen, model.parameter_group("e_dsr1")):
            assert torch.equal(before, after)


class TestGradReverse:
    def test_forward_identity(self):
        x = torch.randn(4, 7)
        assert torch.equal(grad_reverse(x, 1.0), x)

    @pytest.mark.parametrize("coeff", [0.0, 0.5, 1.0])
    def test_backward_scaled_negation(self, coeff):
        x = torch.randn(5, 3, requires_grad=True)
        upstream = torch.randn(5, 3)
        grad_reverse(x, coeff).backward(upstream)
        assert torch.equal(x.grad, -coeff * upstream)

    def test_negative_coeff_rejected(self):
        with pytest.raises(ValueError):
            grad_reverse(torch.zeros(1), -0.5)

    def test_matches_identity_path_times_minus_lambda(self):
        # scalar loss downstream: dL/dx == -lambda * (identity-path dL/dx)
        torch.manual_seed(1)
        layer = nn.Linear(6, 1)
        for coeff in (0.0, 0.5, 1.0):
            x = torch.randn(3, 6, requires_grad=True)
            layer(grad_reverse(x, coeff)).sum().backward()
            g_reversed = x.grad.clone()
            x2 = x.detach().clone().requires_grad_(True)
            layer(x2).sum().backward()
            assert torch.equal(g_reversed, -coeff * x2.grad)


class TestDomainClassifier:
    def test_zero_final_layer_gives_half(self, model):
        nn.init.zeros_(model.c_b1.fc3.weight)
        nn.init.zeros_(model.c_b1.fc3.bias)
        p = model.c_b1(torch.randn(3, 64, 5, 5))
        assert torch.allclose(p, torch.full((3,), 0.5))

    def test_output_shape_and_range(self, model):
        p = model.c_b2(torch.randn(2, 128, 8, 8) * 10)
        assert p.shape == (2,)
        assert ((p > 0) & (p < 1)).all()


class TestDetectionHead:
    def test_output_shapes(self, model):
        rois = torch.randn(5, 128, 4, 4)
        out = model.d_di(rois)
        assert out.logits.shape == (5, 4)
        assert out.deltas.shape == (5, 3, 4)

    def test_zero_final_layer_uniform_softmax(self, model):
        nn.init.zeros_(model.d_b.cls.weight)
        nn.init.zeros_(model.d_b.cls.bias)
        out = model.d_b(torch.randn(4, 128, 4, 4))
        probs = torch.softmax(out.logits, dim=1)
        assert torch.allclose(probs, torch.full((4, 4), 0.25), atol=1e-6)

    def test_heads_disjoint(self, model):
        rois = torch.randn(3, 128, 4, 4)
        assert not torch.equal(model.d_b(rois).logits, model.d_di(rois).logits)


class TestReconstructor:
    def test_shape_contract(self, model):
        a = torch.randn(6, 128, 4, 4)
        b = torch.randn(6, 128, 4, 4)
        assert model.r(a, b).shape == (6, 128, 4, 4)

    def test_select_first_half_identity(self, model):
        c = 128
        with torch.no_grad():
            model.r.conv.weight.zero_()
            model.r.conv.bias.zero_()
            for i in range(c):
                model.r.conv.weight[i, i, 0, 0] = 1.0
        a_di = torch.randn(3, c, 4, 4)
        a_ds = torch.randn(3, c, 4, 4)
        assert torch.equal(model.r(a_di, a_ds), a_di)

    def test_zero_inputs_zero_bias(self, model):
        with torch.no_grad():
            model.r.conv.bias.zero_()
        out = model.r(torch.zeros(2, 128, 4, 4), torch.zeros(2, 128, 4, 4))
        assert torch.equal(out, torch.zeros_like(out))

    def test_mismatched_shapes(self, model):
        with pytest.raises(ValueError):
            model.r(torch.zeros(2, 128, 4, 4), torch.zeros(3, 128, 4, 4))


def bilinear_oracle(grid, y, x):
    """Closed-form bilinear interpolation with half-pixel centers and
    border replication; grid is a 2-d numpy-like array."""
    h, w = grid.shape
    iy, ix = y - 0.5, x - 0.5
    y0, x0 = int(torch.tensor(iy).floor()), int(torch.tensor(ix).floor())
    wy, wx = iy - y0, ix - x0

    def at(r, c):
        return float(grid[min(max(r, 0), h - 1), min(max(c, 0), w - 1)])

    top = at(y0, x0) * (1 - wx) + at(y0, x0 + 1) * wx
    bottom = at(y0 + 1, x0) * (1 - wx) + at(y0 + 1, x0 + 1) * wx
    return top * (1 - wy) + bottom * wy


class TestRoiAlign:
    def test_constant_field(self):
        fmap = torch.full((1, 2, 8, 8), 3.25, dtype=torch.float64)
        props = single_box_proposals([5.0, 9.0, 37.0, 50.0])
        out = roi_align(fmap, props, out_size=4, stride=8)
        assert torch.allclose(out, torch.full_like(out, 3.25))

    def test_exact_single_cell(self):
        fmap = torch.arange(64, dtype=torch.float64).reshape(1, 1, 8, 8)
        # box covering exactly feature cell (row 2, col 3): pixels 24..32 x 16..24
        props = single_box_proposals([24.0, 16.0, 32.0, 24.0])
        out = roi_align(fmap, props, out_size=1, stride=8)
        assert float(out) == float(fmap[0, 0, 2, 3])

    def test_linear_ramp_recovers_center(self):
        # field value f(x) = x sampled at cell centers: cell j holds j + 0.5
        w = 16
        ramp = (torch.arange(w, dtype=torch.float64) + 0.5).repeat(w, 1)
        fmap = ramp.reshape(1, 1, w, w)
        x0 = 52.0
        props = single_box_proposals([x0 - 8, 24.0, x0 + 8, 40.0])
        out = roi_align(fmap, props, out_size=1, stride=8)
        assert float(out) == pytest.approx(x0 / 8, abs=1e-5)

    def test_matches_bilinear_oracle(self):
        torch.manual_seed(3)
        fmap = torch.randn(1, 1, 8, 8, dtype=torch.float64)
        box = [9.0, 13.0, 47.0, 55.0]
        s = 4
        props = single_box_proposals(box)
        out = roi_align(fmap, props, out_size=s, stride=8)
        x1, y1, x2, y2 = (v / 8 for v in box)
        for r in range(s):
            for c in range(s):
                cy = y1 + (r + 0.5) * (y2 - y1) / s
                cx = x1 + (c + 0.5) * (x2 - x1) / s
                expected = bilinear_oracle(fmap[0, 0], cy, cx)
                assert float(out[0, 0, r, c]) == pytest.approx(expected, abs=1e-12)

    def test_empty_proposals(self):
        out = roi_align(torch.randn(1, 3, 8, 8), ProposalSet.empty(), 4, 8)
        assert out.shape == (0, 3, 4, 4)

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(5)
        fmap = torch.randn(1, 2, 6, 6, dtype=torch.float64, requires_grad=True)
        props = ProposalSet(
            torch.tensor([[4.0, 6.0, 30.0, 28.0], [10.0, 2.0, 40.0, 44.0]], dtype=torch.float64),
            torch.ones(2, dtype=torch.float64),
            torch.zeros(2, dtype=torch.long),
        )
        weights = torch.randn(2, 2, 3, 3, dtype=torch.float64)
        out = roi_align(fmap, props, out_size=3, stride=8)
        (out * weights).sum().backward()
        analytic = fmap.grad.clone()
        eps = 1e-6
        with torch.no_grad():
            for idx in [(0, 0, 1, 2), (0, 1, 3, 3), (0, 0, 2, 4), (0, 1, 5, 1)]:
                base = fmap[idx].item()
                for direction, store in ((eps, "plus"), (-eps, "minus")):
                    fmap[idx] = base + direction
                    value = (roi_align(fmap, props, 3, 8) * weights).sum().item()
                    if store == "plus":
                        plus = value
                    else:
                        minus = value
                fmap[idx] = base
                numeric = (plus - minus) / (2 * eps)
                denom = max(abs(numeric), 1e-8)
                assert abs(numeric - float(analytic[idx])) / denom < 1e-4


class TestAnchorsAndDeltas:
    def test_anchor_grid_count_and_centers(self):
        anchors = anchor_grid(2, 3, stride=8, base_size=16, ratios=(0.5, 1.0, 2.0))
        assert anchors.shape == (2 * 3 * 3, 4)
        centers_x = (anchors[:, 0] + anchors[:, 2]) / 2
        assert set(torch.unique(centers_x).tolist()) == {4.0, 12.0, 20.0}

    def test_encode_decode_roundtrip(self):
        torch.manual_seed(2)
        anchors = torch.rand(10, 4) * 20
        anchors[:, 2:] = anchors[:, :2] + 5 + torch.rand(10, 2) * 10
        targets = anchors + torch.randn(10, 4)
        decoded = decode_deltas(anchors, encode_deltas(anchors, targets))
        assert torch.allclose(decoded, targets, atol=1e-5)


class TestPropose:
    def test_contract(self, model):
        state = model.forward_maps(torch.randn(1, 3, 64, 64))
        props = model.propose(state.f_di2, top_k=10)
        assert len(props) <= 10
        diffs = props.objectness[1:] - props.objectness[:-1]
        assert (diffs <= 1e-9).all()
        assert (props.boxes[:, 0] >= 0).all() and (props.boxes[:, 2] <= 64).all()

    def test_invalid_top_k(self, model):
        state = model.forward_maps(torch.randn(1, 3, 64, 64))
        with pytest.raises(ValueError):
            model.propose(state.f_di2, top_k=0)

    def test_nms_keeps_one_of_identical_boxes(self):
        boxes = torch.tensor([[0.0, 0, 10, 10], [0.0, 0, 10, 10], [20.0, 20, 30, 30]])
        scores = torch.tensor([0.9, 0.8, 0.7])
        keep = nms(boxes, scores, threshold=0.7)
        assert keep.tolist() == [0, 2]

    def test_nms_empty(self):
        keep = nms(torch.zeros((0, 4)), torch.zeros(0), 0.5)
        assert keep.numel() == 0

    def test_rpn_trains_to_localize_bright_square(self):
        torch.manual_seed(0)
        model = DisentangledDetector(ModelConfig())
        img = torch.full((1, 3, 64, 64), -0.3)
        img[:, :, 20:40, 24:44] = 0.4
        gt = ((AnnotatedBox(BoundingBox(24, 20, 44, 40), 1),),)
        params = [
            p
            for g in ("e_b1", "e_dir1", "e_b2", "e_dir2", "rpn")
            for p in model.parameter_group(g)
        ]
        opt = torch.optim.SGD(params, lr=1e-3, momentum=0.9)
        for _ in range(300):
            opt.zero_grad()
            state = model.forward_maps(img)
            loss = model.rpn_loss(state.f_di2, gt)
            loss.backward()
            opt.step()
        model.eval()
        with torch.no_grad():
            props = model.propose(model.forward_maps(img).f_di2, top_k=5)
        top = BoundingBox(*(float(v) for v in props.boxes[0]))
        assert iou(top, gt[0][0].box) >= 0.5
