"""Progressive feature disentanglement for domain-adaptive object
detection, with a built-in synthetic two-domain benchmark."""

from .boxes import AnnotatedBox, BoundingBox, DomainBatch, ProposalSet, clip_box, iou
from .network import DisentangledDetector, ModelConfig, grad_reverse, roi_align
from .training import TrainConfig, Trainer, train

__all__ = [
    "AnnotatedBox",
    "BoundingBox",
    "DomainBatch",
    "ProposalSet",
    "clip_box",
    "iou",
    "DisentangledDetector",
    "ModelConfig",
    "grad_reverse",
    "roi_align",
    "TrainConfig",
    "Trainer",
    "train",
]
