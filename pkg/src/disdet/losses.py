"""Scalar training objectives.

Focal domain loss, the per-head detection loss, the Donsker-Varadhan
mutual-information bound with bias-corrected gradients, the proposal
relation-consistency loss, the crop reconstruction loss, and the sums
that make up each training stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import torch
import torch.nn.functional as F

from .boxes import AnnotatedBox, ProposalSet, box_iou_matrix
from .network import DetectionOutput, StatisticsNetwork, encode_deltas

PROB_EPS = 1e-7

STAGE_TERMS = {
    "fd": (
        "rpn", "detection_b", "detection_di",
        "focal_c_b1", "focal_c_ds1", "focal_c_b2", "focal_c_ds2",
    ),
    "fs": ("detection_di", "focal_c_ds1", "focal_c_ds2", "mi1", "mi2", "relation"),
    "fr": ("reconstruction",),
}


@dataclass(frozen=True)
class FocalConfig:
    alpha: float = 1.0
    gamma: float = 2.0

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.gamma < 0:
            raise ValueError("focal alpha and gamma must be non-negative")


def focal_loss(p: torch.Tensor, cfg: FocalConfig = FocalConfig()) -> torch.Tensor:
    """Hard-example-weighted negative log likelihood, averaged over the batch.

    `p` is the predicted probability of the correct domain label for each
    image; it is clamped away from {0, 1} for stability.
    """
    p = torch.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
    return (cfg.alpha * (1.0 - p) ** cfg.gamma * (-torch.log(p))).mean()


def domain_focal_loss(
    target_prob: torch.Tensor, domain: int, cfg: FocalConfig = FocalConfig()
) -> torch.Tensor:
    """Focal loss for a domain classifier output.

    `target_prob` is the classifier's estimate of the *target* domain, so
    the probability of the correct label is 1 - target_prob for source
    images (domain 0) and target_prob itself for target images (domain 1).
    """
    if domain not in (0, 1):
        raise ValueError(f"domain tag must be 0 or 1, got {domain}")
    correct = target_prob if domain == 1 else 1.0 - target_prob
    return focal_loss(correct, cfg)


def match_proposals(
    proposals: ProposalSet,
    annotations: tuple[tuple[AnnotatedBox, ...], ...],
    match_iou: float,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Assign each proposal a class label and a box-regression target.

    Labels: 0 for background, 1 + class index for foreground (IoU with
    some ground-truth box >= match_iou). Regression targets are zeros for
    background rows.
    """
    k = len(proposals)
    labels = torch.zeros(k, dtype=torch.long)
    targets = torch.zeros((k, 4), dtype=proposals.boxes.dtype)
    for i, img_annotations in enumerate(annotations):
        mask = proposals.batch_index == i
        if not mask.any() or not img_annotations:
            continue
        gt = torch.tensor(
            [a.box.as_tuple() for a in img_annotations], dtype=proposals.boxes.dtype
        )
        gt_labels = torch.tensor([a.label for a in img_annotations], dtype=torch.long)
        ious = box_iou_matrix(proposals.boxes[mask], gt)
        best_iou, best_gt = ious.max(dim=1)
        fg = best_iou >= match_iou
        img_labels = torch.where(fg, gt_labels[best_gt] + 1, torch.zeros_like(best_gt))
        labels[mask] = img_labels
        img_targets = torch.zeros((int(mask.sum()), 4), dtype=proposals.boxes.dtype)
        if fg.any():
            img_targets[fg] = encode_deltas(
                proposals.boxes[mask][fg], gt[best_gt[fg]]
            )
        targets[mask] = img_targets
    return labels, targets


def detection_loss(
    output: DetectionOutput,
    proposals: ProposalSet,
    annotations: tuple[tuple[AnnotatedBox, ...], ...],
    match_iou: float = 0.5,
) -> torch.Tensor:
    """Classification plus box-regression loss over a proposal set.

    Cross-entropy over every proposal (background class index 0) and
    smooth-L1 (beta 1) over the four delta coordinates of foreground
    proposals, jointly normalized by the number of proposals. Returns 0
    for an empty proposal set; callers record the skip.
    """
    k = len(proposals)
    if k == 0:
        return output.logits.new_zeros(()) if output.logits.numel() else torch.zeros(())
    labels, targets = match_proposals(proposals, annotations, match_iou)
    ce = F.cross_entropy(output.logits, labels, reduction="sum")
    fg = labels > 0
    reg = output.logits.new_zeros(())
    if fg.any():
        fg_deltas = output.deltas[fg, labels[fg] - 1]
        reg = F.smooth_l1_loss(fg_deltas, targets[fg], beta=1.0, reduction="sum")
    return (ce + reg) / k


@dataclass(frozen=True)
class MISamplePair:
    """Paired samples for the mutual-information bound.

    joint_x / joint_z are drawn together; marginal_z is the same z batch
    in shuffled order, standing in for the product of marginals.
    """

    joint_x: torch.Tensor
    joint_z: torch.Tensor
    marginal_z: torch.Tensor

    def __post_init__(self) -> None:
        n = self.joint_x.shape[0]
        if n < 2:
            raise ValueError("mutual-information estimation needs at least 2 samples")
        if self.joint_z.shape[0] != n or self.marginal_z.shape[0] != n:
            raise ValueError("joint and marginal batches must have equal size")


def make_sample_pair(
    x: torch.Tensor, z: torch.Tensor, generator: Optional[torch.Generator] = None
) -> MISamplePair:
    perm = torch.randperm(z.shape[0], generator=generator)
    return MISamplePair(x, z, z[perm])


@dataclass
class MineEma:
    """Moving average of the marginal-term denominator, kept in log space."""

    momentum: float = 0.99
    log_denominator: Optional[float] = None

    def update(self, log_mean_exp: float) -> float:
        if self.log_denominator is None:
            self.log_denominator = log_mean_exp
        else:
            a = math.log(self.momentum) + self.log_denominator
            b = math.log(1.0 - self.momentum) + log_mean_exp
            hi, lo = max(a, b), min(a, b)
            self.log_denominator = hi + math.log1p(math.exp(lo - hi))
        return self.log_denominator


def mine_estimate(
    t_net: StatisticsNetwork, pairs: MISamplePair, ema: Optional[MineEma] = None
) -> torch.Tensor:
    """Donsker-Varadhan lower bound on mutual information.

    Value: mean T(x,z) - log mean exp T(x,z'), with the log-mean-exp
    computed by max subtraction (exact cancellation for a constant
    statistic, stable otherwise). When an EMA state is supplied, the
    gradient of the second term is divided by the moving-average
    denominator instead of the per-batch one (bias-corrected estimator);
    the forward value is unchanged.
    """
    t_joint = t_net(pairs.joint_x, pairs.joint_z)
    t_marg = t_net(pairs.joint_x, pairs.marginal_z)
    peak = t_marg.detach().max()
    log_mean_exp = peak + torch.log(torch.exp(t_marg - peak).mean())
    if ema is None:
        return t_joint.mean() - log_mean_exp
    ema.update(float(log_mean_exp.detach()))
    corrected = torch.exp(t_marg - ema.log_denominator).mean()
    second = log_mean_exp.detach() + (corrected - corrected.detach())
    return t_joint.mean() - second


def build_adjacency(pooled: torch.Tensor) -> torch.Tensor:
    """Row-softmax of the Gram matrix of pooled per-proposal features."""
    if pooled.ndim != 2 or pooled.shape[0] < 1:
        raise ValueError(f"expected a (k,m) matrix with k >= 1, got {tuple(pooled.shape)}")
    return torch.softmax(pooled @ pooled.T, dim=1)


def relation_consistency_loss(
    rois_di: torch.Tensor, rois_b: torch.Tensor
) -> torch.Tensor:
    """Squared Frobenius distance between branch proposal-affinity graphs.

    Both crop stacks are average-pooled per proposal before building the
    row-stochastic adjacency matrices. The base-branch adjacency is a
    constant: gradients flow only through the invariant branch.
    """
    if rois_di.shape != rois_b.shape:
        raise ValueError("branch crops must share shape")
    if rois_di.shape[0] == 0:
        return rois_di.new_zeros(())
    p_di = rois_di.mean(dim=(2, 3))
    p_b = rois_b.detach().mean(dim=(2, 3))
    a_di = build_adjacency(p_di)
    a_b = build_adjacency(p_b)
    return ((a_di - a_b) ** 2).sum()


def reconstruction_loss(a_r: torch.Tensor, a_b: torch.Tensor) -> torch.Tensor:
    """Mean squared elementwise difference between crops.

    Normalized by element count so the magnitude is independent of crop
    resolution and proposal count.
    """
    if a_r.shape != a_b.shape:
        raise ValueError(
            f"reconstruction requires matching shapes, got {tuple(a_r.shape)} vs {tuple(a_b.shape)}"
        )
    if a_r.numel() == 0:
        return a_r.new_zeros(())
    return ((a_r - a_b) ** 2).mean()


@dataclass
class LossReport:
    """Named scalars of the loss terms active in one stage execution."""

    stage: str
    terms: dict[str, float] = field(default_factory=dict)
    skipped: tuple[str, ...] = ()

    def total(self) -> float:
        return float(sum(self.terms.values()))

    def as_json_dict(self, iteration: int) -> dict:
        entry: dict = {"iter": iteration, "stage": self.stage}
        entry.update({k: float(v) for k, v in self.terms.items()})
        if self.skipped:
            entry["skipped"] = list(self.skipped)
        return entry


def _compose(stage: str, terms: Mapping[str, float], weights: Optional[Mapping[str, float]]):
    allowed = STAGE_TERMS[stage]
    unknown = set(terms) - set(allowed)
    if unknown:
        raise ValueError(f"terms {sorted(unknown)} do not belong to stage {stage}")
    weights = weights or {}
    return sum(weights.get(name, 1.0) * value for name, value in terms.items())


def compose_stage_fd(terms: Mapping[str, float], weights: Optional[Mapping[str, float]] = None):
    """Decomposition-stage total: detection on both heads plus the four
    adversarial domain terms."""
    return _compose("fd", terms, weights)


def compose_stage_fs(terms: Mapping[str, float], weights: Optional[Mapping[str, float]] = None):
    """Separation-stage total: invariant-head detection, domain terms on
    the specific branches, both mutual-information bounds, and the
    relation-consistency penalty."""
    return _compose("fs", terms, weights)


def compose_stage_fr(terms: Mapping[str, float], weights: Optional[Mapping[str, float]] = None):
    """Reconstruction-stage total (a single term)."""
    return _compose("fr", terms, weights)
