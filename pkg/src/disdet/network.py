"""Forward computations of the progressive-disentanglement detector.

The model is a small two-stage trunk. Stage one produces a base map and a
pair of branch maps (domain-invariant / domain-specific); the invariant
branch is added back onto the base map before stage two repeats the split
at coarser resolution. Region proposals come from the second invariant
map, and fixed-size per-proposal crops feed two independent detection
heads, the mutual-information estimators, and the reconstructor.

Every trainable parameter belongs to exactly one named group so the
training schedule can update groups selectively while the rest stay
bitwise frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .boxes import AnnotatedBox, ProposalSet, box_iou_matrix

PARAMETER_GROUPS = (
    "e_b1", "e_b2",
    "e_dir1", "e_dsr1", "e_dir2", "e_dsr2",
    "rpn", "d_b", "d_di",
    "c_b1", "c_ds1", "c_b2", "c_ds2",
    "t1", "t2", "r",
)

# Clamp on predicted log-size deltas so decoded boxes cannot overflow.
_MAX_DELTA_WH = math.log(1000.0 / 16.0)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    num_classes: int = 3
    stage1_channels: int = 64
    stage2_channels: int = 128
    roi_size: int = 4
    head_hidden: int = 256
    classifier_hidden: int = 64
    mi_hidden: int = 128
    anchor_base: float = 18.0
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    nms_threshold: float = 0.7
    rpn_positive_iou: float = 0.7
    rpn_negative_iou: float = 0.3
    first_layer_enabled: bool = True

    @property
    def stage1_stride(self) -> int:
        return 4

    @property
    def feature_stride(self) -> int:
        return 8


@dataclass(frozen=True)
class DisentangledState:
    """The named maps of the two disentanglement layers.

    The second-layer fields are filled by `forward_second_layer`; with the
    first layer disabled (`one layer` ablation) the branch maps of layer
    one are None and f1 aliases f_b1.
    """

    f_b1: torch.Tensor
    f_di1: Optional[torch.Tensor]
    f_ds1: Optional[torch.Tensor]
    f1: torch.Tensor
    f_b2: Optional[torch.Tensor] = None
    f_di2: Optional[torch.Tensor] = None
    f_ds2: Optional[torch.Tensor] = None


class DetectionOutput(NamedTuple):
    logits: torch.Tensor  # (k, num_classes + 1), index 0 is background
    deltas: torch.Tensor  # (k, num_classes, 4), per foreground class


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x: torch.Tensor, coeff: float) -> torch.Tensor:
        ctx.coeff = coeff
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        return grad_output.neg() * ctx.coeff, None


def grad_reverse(x: torch.Tensor, coeff: float = 1.0) -> torch.Tensor:
    """Identity forward; backward multiplies the incoming gradient by -coeff."""
    if coeff < 0:
        raise ValueError(f"reversal coefficient must be >= 0, got {coeff}")
    return _GradReverse.apply(x, coeff)


def _conv(cin: int, cout: int, stride: int) -> nn.Conv2d:
    conv = nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1)
    # fan-out He init: default torch init contracts activations through
    # stacked stages until the maps are near-constant
    nn.init.kaiming_normal_(conv.weight, mode="fan_out", nonlinearity="relu")
    nn.init.zeros_(conv.bias)
    return conv


class BackboneStage(nn.Module):
    """Plain strided conv blocks.

    Deliberately normalization-free: per-image normalization would erase
    exactly the global appearance statistics the domain classifiers need
    to see, and fan-out He init keeps the stack well-scaled without it.
    """

    def __init__(self, channels: list[int], strides: list[int]):
        super().__init__()
        layers: list[nn.Module] = []
        for cin, cout, s in zip(channels[:-1], channels[1:], strides):
            layers += [_conv(cin, cout, s), nn.ReLU(inplace=True)]
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class BranchExtractor(nn.Module):
    """Three channel-preserving 3x3 convolutions, linear final layer.

    With zero_init_final the last layer starts at zero, so an untrained
    branch contributes nothing. The first-layer extractors use this for a
    stable additive warm start (the summed map begins as the plain trunk
    map); the second-layer extractors keep a standard init, since the
    proposal head cannot learn from an all-zero input map.
    """

    def __init__(self, channels: int, zero_init_final: bool = False):
        super().__init__()
        self.conv1 = _conv(channels, channels, 1)
        self.conv2 = _conv(channels, channels, 1)
        self.conv3 = _conv(channels, channels, 1)
        if zero_init_final:
            nn.init.zeros_(self.conv3.weight)
            nn.init.zeros_(self.conv3.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        return self.conv3(x)


class RegionProposalHead(nn.Module):
    """Single-scale anchor head: shared 3x3 conv, objectness + box deltas."""

    def __init__(self, channels: int, num_anchors: int):
        super().__init__()
        self.shared = _conv(channels, channels, 1)
        self.objectness = nn.Conv2d(channels, num_anchors, kernel_size=1)
        self.deltas = nn.Conv2d(channels, num_anchors * 4, kernel_size=1)
        for head in (self.objectness, self.deltas):
            nn.init.normal_(head.weight, std=0.01)
            nn.init.zeros_(head.bias)

    def forward(self, fmap: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = F.relu(self.shared(fmap))
        return self.objectness(x), self.deltas(x)


class DetectionHead(nn.Module):
    """Flattened RoI features through one hidden layer to class logits and
    per-class box deltas."""

    def __init__(self, channels: int, roi_size: int, num_classes: int, hidden: int):
        super().__init__()
        self.num_classes = num_classes
        self.fc = nn.Linear(channels * roi_size * roi_size, hidden)
        self.cls = nn.Linear(hidden, num_classes + 1)
        self.reg = nn.Linear(hidden, num_classes * 4)
        nn.init.normal_(self.cls.weight, std=0.01)
        nn.init.zeros_(self.cls.bias)
        nn.init.normal_(self.reg.weight, std=0.001)
        nn.init.zeros_(self.reg.bias)

    def forward(self, rois: torch.Tensor) -> DetectionOutput:
        x = F.relu(self.fc(rois.flatten(1)))
        logits = self.cls(x)
        deltas = self.reg(x).reshape(-1, self.num_classes, 4)
        return DetectionOutput(logits, deltas)


class DomainClassifier(nn.Module):
    """Global-average-pool, three fully-connected layers, sigmoid.

    Output is the estimated probability that the image comes from the
    target domain (tag convention: source 0, target 1). A gradient
    reversal layer sits between the feature map and the classifier. The
    pooled vector is layer-normalized first: pooled ReLU features are
    sparse and small, and without rescaling the first linear layer is
    bias-dominated and the classifier cannot get off the ground.
    """

    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, 1)

    def forward(self, fmap: torch.Tensor, reversal_coeff: float = 1.0) -> torch.Tensor:
        x = grad_reverse(fmap, reversal_coeff)
        x = self.norm(x.mean(dim=(2, 3)))
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        return torch.sigmoid(self.fc3(x)).squeeze(-1)


class StatisticsNetwork(nn.Module):
    """Three fully-connected layers scoring concatenated sample pairs."""

    def __init__(self, x_dim: int, z_dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(x_dim + z_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, 1)

    def forward(self, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        h = torch.cat([x, z], dim=1)
        h = F.relu(self.fc1(h))
        h = F.relu(self.fc2(h))
        return self.fc3(h).squeeze(-1)


class Reconstructor(nn.Module):
    """1x1 convolution mapping concatenated branch crops (2C) back to C."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(2 * channels, channels, kernel_size=1)

    def forward(self, a_di: torch.Tensor, a_ds: torch.Tensor) -> torch.Tensor:
        if a_di.shape != a_ds.shape:
            raise ValueError(
                f"branch crops must share shape, got {tuple(a_di.shape)} vs {tuple(a_ds.shape)}"
            )
        return self.conv(torch.cat([a_di, a_ds], dim=1))


def anchor_grid(
    fh: int,
    fw: int,
    stride: int,
    base_size: float,
    ratios: tuple[float, ...],
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Anchors in image-pixel corner format, (fh*fw*len(ratios), 4).

    One scale; each ratio r yields height base*sqrt(r), width base/sqrt(r),
    centered on the feature cell centers.
    """
    shifts_x = (torch.arange(fw, dtype=dtype) + 0.5) * stride
    shifts_y = (torch.arange(fh, dtype=dtype) + 0.5) * stride
    ws = torch.tensor([base_size / math.sqrt(r) for r in ratios], dtype=dtype)
    hs = torch.tensor([base_size * math.sqrt(r) for r in ratios], dtype=dtype)
    cy, cx = torch.meshgrid(shifts_y, shifts_x, indexing="ij")
    cx = cx.reshape(-1, 1).expand(-1, len(ratios))
    cy = cy.reshape(-1, 1).expand(-1, len(ratios))
    boxes = torch.stack(
        [cx - ws / 2, cy - hs / 2, cx + ws / 2, cy + hs / 2], dim=-1
    )
    return boxes.reshape(-1, 4)


def encode_deltas(anchors: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Standard box regression parametrization (dx, dy, dw, dh)."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tcx = targets[:, 0] + 0.5 * tw
    tcy = targets[:, 1] + 0.5 * th
    return torch.stack(
        [(tcx - acx) / aw, (tcy - acy) / ah, torch.log(tw / aw), torch.log(th / ah)],
        dim=1,
    )


def decode_deltas(anchors: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w = aw * torch.exp(deltas[:, 2].clamp(max=_MAX_DELTA_WH))
    h = ah * torch.exp(deltas[:, 3].clamp(max=_MAX_DELTA_WH))
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=1)


def nms(boxes: torch.Tensor, scores: torch.Tensor, threshold: float) -> torch.Tensor:
    """Indices kept by greedy non-maximum suppression, highest score first.

    Ties keep input order (stable sort) so results are reproducible.
    """
    order = torch.argsort(scores, descending=True, stable=True)
    n = order.numel()
    if n == 0:
        return torch.zeros((0,), dtype=torch.long)
    ranked = boxes.detach()[order]
    overlaps = (box_iou_matrix(ranked, ranked) > threshold).numpy()
    suppressed = [False] * n
    keep = []
    for i in range(n):
        if suppressed[i]:
            continue
        keep.append(i)
        for j in overlaps[i].nonzero()[0]:
            if j > i:
                suppressed[j] = True
    return order[keep]


def roi_align(
    fmap: torch.Tensor, proposals: ProposalSet, out_size: int, stride: int
) -> torch.Tensor:
    """Bilinear crop of `fmap` inside each proposal onto an SxS grid.

    Proposal coordinates are image pixels; they are divided by `stride`
    internally. One sample per output cell, taken at the cell center with
    the half-pixel convention (the value of feature cell j lives at
    continuous coordinate j + 0.5). Differentiable in `fmap`.
    """
    k = len(proposals)
    channels = fmap.shape[1]
    if k == 0:
        return fmap.new_zeros((0, channels, out_size, out_size))
    boxes = proposals.boxes.to(fmap.dtype) / float(stride)
    x1, y1, x2, y2 = boxes.unbind(1)
    steps = (torch.arange(out_size, dtype=fmap.dtype, device=fmap.device) + 0.5) / out_size
    cx = x1[:, None] + steps[None, :] * (x2 - x1)[:, None]
    cy = y1[:, None] + steps[None, :] * (y2 - y1)[:, None]
    ix = cx - 0.5
    iy = cy - 0.5
    h, w = fmap.shape[2], fmap.shape[3]
    x0 = ix.floor()
    y0 = iy.floor()
    wx = ix - x0
    wy = iy - y0
    x0i = x0.long().clamp(0, w - 1)
    x1i = (x0.long() + 1).clamp(0, w - 1)
    y0i = y0.long().clamp(0, h - 1)
    y1i = (y0.long() + 1).clamp(0, h - 1)
    maps = fmap.permute(0, 2, 3, 1).reshape(-1, channels)  # (B*H*W, C)
    base = proposals.batch_index.view(-1, 1, 1) * (h * w)

    def gather(yi: torch.Tensor, xi: torch.Tensor) -> torch.Tensor:
        flat = (base + yi[:, :, None] * w + xi[:, None, :]).reshape(-1)
        return maps.index_select(0, flat).view(k, out_size, out_size, channels)

    v00 = gather(y0i, x0i)
    v01 = gather(y0i, x1i)
    v10 = gather(y1i, x0i)
    v11 = gather(y1i, x1i)
    wxr = wx[:, None, :, None]
    wyr = wy[:, :, None, None]
    out = (
        v00 * (1 - wyr) * (1 - wxr)
        + v01 * (1 - wyr) * wxr
        + v10 * wyr * (1 - wxr)
        + v11 * wyr * wxr
    )
    return out.permute(0, 3, 1, 2)


class DisentangledDetector(nn.Module):
    """Full two-layer disentanglement network with named parameter groups."""

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        cfg = config or ModelConfig()
        self.config = cfg
        c1, c2 = cfg.stage1_channels, cfg.stage2_channels
        self.e_b1 = BackboneStage([3, c1 // 2, c1, c1], [2, 2, 1])
        self.e_b2 = BackboneStage([c1, c2, c2], [2, 1])
        self.e_dir1 = BranchExtractor(c1, zero_init_final=True)
        self.e_dsr1 = BranchExtractor(c1, zero_init_final=True)
        self.e_dir2 = BranchExtractor(c2)
        self.e_dsr2 = BranchExtractor(c2)
        self.rpn = RegionProposalHead(c2, len(cfg.anchor_ratios))
        self.d_b = DetectionHead(c2, cfg.roi_size, cfg.num_classes, cfg.head_hidden)
        self.d_di = DetectionHead(c2, cfg.roi_size, cfg.num_classes, cfg.head_hidden)
        self.c_b1 = DomainClassifier(c1, cfg.classifier_hidden)
        self.c_ds1 = DomainClassifier(c1, cfg.classifier_hidden)
        self.c_b2 = DomainClassifier(c2, cfg.classifier_hidden)
        self.c_ds2 = DomainClassifier(c2, cfg.classifier_hidden)
        self.t1 = StatisticsNetwork(c1, c1, cfg.mi_hidden)
        self.t2 = StatisticsNetwork(c2, c2, cfg.mi_hidden)
        self.r = Reconstructor(c2)

    # -- parameter groups -------------------------------------------------

    def parameter_group(self, name: str) -> Iterator[nn.Parameter]:
        if name not in PARAMETER_GROUPS:
            raise KeyError(f"unknown parameter group {name!r}")
        return getattr(self, name).parameters()

    def group_names(self) -> tuple[str, ...]:
        return PARAMETER_GROUPS

    # -- forward passes ----------------------------------------------------

    def forward_first_layer(self, images: torch.Tensor) -> DisentangledState:
        if images.shape[0] == 0:
            raise ValueError("empty image batch")
        f_b1 = self.e_b1(images)
        if not self.config.first_layer_enabled:
            return DisentangledState(f_b1=f_b1, f_di1=None, f_ds1=None, f1=f_b1)
        f_di1 = self.e_dir1(f_b1)
        f_ds1 = self.e_dsr1(f_b1)
        return DisentangledState(f_b1=f_b1, f_di1=f_di1, f_ds1=f_ds1, f1=f_b1 + f_di1)

    def forward_second_layer(self, state: DisentangledState) -> DisentangledState:
        f_b2 = self.e_b2(state.f1)
        return replace(
            state, f_b2=f_b2, f_di2=self.e_dir2(f_b2), f_ds2=self.e_dsr2(f_b2)
        )

    def forward_maps(self, images: torch.Tensor) -> DisentangledState:
        return self.forward_second_layer(self.forward_first_layer(images))

    # -- region proposals --------------------------------------------------

    def anchors_for(self, f_di2: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        return anchor_grid(
            f_di2.shape[2], f_di2.shape[3], cfg.feature_stride,
            cfg.anchor_base, cfg.anchor_ratios, dtype=f_di2.dtype,
        )

    def propose(self, f_di2: torch.Tensor, top_k: int) -> ProposalSet:
        """Decode, clip, suppress, and keep the top_k proposals per image.

        May legitimately return zero proposals for an image; callers skip
        crop-dependent losses in that case.
        """
        if top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {top_k}")
        cfg = self.config
        obj_logits, delta_maps = self.rpn(f_di2)
        anchors = self.anchors_for(f_di2)
        batch = f_di2.shape[0]
        num_a = len(cfg.anchor_ratios)
        obj_logits = obj_logits.detach()
        delta_maps = delta_maps.detach()
        all_boxes, all_scores, all_index = [], [], []
        for i in range(batch):
            scores = torch.sigmoid(obj_logits[i]).permute(1, 2, 0).reshape(-1)
            deltas = (
                delta_maps[i]
                .reshape(num_a, 4, *delta_maps.shape[2:])
                .permute(2, 3, 0, 1)
                .reshape(-1, 4)
            )
            boxes = decode_deltas(anchors, deltas)
            boxes[:, 0::2] = boxes[:, 0::2].clamp(0, cfg.image_size)
            boxes[:, 1::2] = boxes[:, 1::2].clamp(0, cfg.image_size)
            valid = (boxes[:, 2] - boxes[:, 0] > 1e-3) & (boxes[:, 3] - boxes[:, 1] > 1e-3)
            boxes, scores = boxes[valid], scores[valid]
            if boxes.shape[0] == 0:
                continue
            keep = nms(boxes, scores, cfg.nms_threshold)[:top_k]
            all_boxes.append(boxes[keep])
            all_scores.append(scores[keep])
            all_index.append(torch.full((keep.numel(),), i, dtype=torch.long))
        if not all_boxes:
            return ProposalSet.empty()
        return ProposalSet(
            torch.cat(all_boxes), torch.cat(all_scores), torch.cat(all_index)
        )

    # -- RPN training ------------------------------------------------------

    def rpn_loss(
        self,
        f_di2: torch.Tensor,
        annotations: tuple[tuple[AnnotatedBox, ...], ...],
    ) -> torch.Tensor:
        """Objectness + box-regression loss of the proposal head.

        Anchor labels: IoU >= rpn_positive_iou with any ground truth is
        positive, < rpn_negative_iou negative, in between ignored; the
        best-overlapping anchor of each ground-truth box is forced
        positive so no object goes unmatched. The objectness term averages
        the positive and negative halves separately so the few positives
        are not drowned by the anchor-grid negatives.
        """
        cfg = self.config
        obj_logits, delta_maps = self.rpn(f_di2)
        anchors = self.anchors_for(f_di2)
        num_a = len(cfg.anchor_ratios)
        total = f_di2.new_zeros(())
        for i, img_annotations in enumerate(annotations):
            logits = obj_logits[i].permute(1, 2, 0).reshape(-1)
            deltas = (
                delta_maps[i]
                .reshape(num_a, 4, *delta_maps.shape[2:])
                .permute(2, 3, 0, 1)
                .reshape(-1, 4)
            )
            if img_annotations:
                gt = torch.tensor(
                    [a.box.as_tuple() for a in img_annotations], dtype=f_di2.dtype
                )
                ious = box_iou_matrix(anchors, gt)
                best_iou, best_gt = ious.max(dim=1)
                labels = torch.full((anchors.shape[0],), -1, dtype=torch.long)
                labels[best_iou < cfg.rpn_negative_iou] = 0
                labels[best_iou >= cfg.rpn_positive_iou] = 1
                labels[ious.argmax(dim=0)] = 1
            else:
                labels = torch.zeros(anchors.shape[0], dtype=torch.long)
                best_gt = labels
            pos = labels == 1
            neg = labels == 0
            if neg.any():
                total = total + F.binary_cross_entropy_with_logits(
                    logits[neg], torch.zeros(int(neg.sum()), dtype=f_di2.dtype)
                )
            if pos.any():
                total = total + F.binary_cross_entropy_with_logits(
                    logits[pos], torch.ones(int(pos.sum()), dtype=f_di2.dtype)
                )
                target = encode_deltas(anchors[pos], gt[best_gt[pos]])
                total = total + F.smooth_l1_loss(deltas[pos], target, beta=1.0)
        return total / max(1, len(annotations))
