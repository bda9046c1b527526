"""Detection scoring: per-class average precision and mAP."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch

from .boxes import BoundingBox, ImageRecord, ProposalSet, iou
from .network import DisentangledDetector, decode_deltas, nms, roi_align
from .synthdata import load_dataset


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: BoundingBox
    label: int
    confidence: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.confidence <= 1.0) or self.confidence != self.confidence:
            raise ValueError(f"confidence must be finite in [0,1], got {self.confidence}")


@dataclass(frozen=True)
class APResult:
    per_class: dict[int, Optional[float]]
    mean_ap: float
    iou_threshold: float
    protocol: str

    def table(self, class_names: Optional[tuple[str, ...]] = None) -> str:
        names = [
            class_names[c] if class_names and c < len(class_names) else f"class{c}"
            for c in sorted(self.per_class)
        ]
        values = [
            "   -  " if self.per_class[c] is None else f"{self.per_class[c]:6.4f}"
            for c in sorted(self.per_class)
        ]
        width = max([len(n) for n in names] + [6])
        header = "  ".join(n.rjust(width) for n in names + ["mAP"])
        row = "  ".join(v.rjust(width) for v in values + [f"{self.mean_ap:6.4f}"])
        return header + "\n" + row

    def csv(self, class_names: Optional[tuple[str, ...]] = None) -> str:
        cols = sorted(self.per_class)
        names = [
            class_names[c] if class_names and c < len(class_names) else f"class{c}"
            for c in cols
        ]
        vals = [
            "" if self.per_class[c] is None else repr(self.per_class[c]) for c in cols
        ]
        return ",".join(names + ["mAP"]) + "\n" + ",".join(vals + [repr(self.mean_ap)])


def _interp_ap_all(recall: np.ndarray, precision: np.ndarray) -> float:
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    change = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[change + 1] - mrec[change]) * mpre[change + 1]))


def _interp_ap_11pt(recall: np.ndarray, precision: np.ndarray) -> float:
    total = 0.0
    for t in np.linspace(0.0, 1.0, 11):
        mask = recall >= t
        total += float(precision[mask].max()) if mask.any() else 0.0
    return total / 11.0


def average_precision(
    detections: Iterable[Detection],
    truth: Iterable[ImageRecord],
    iou_threshold: float = 0.5,
    protocol: str = "all",
) -> dict[int, Optional[float]]:
    """Per-class AP under greedy highest-confidence-first matching.

    Each ground-truth box is matched at most once. Classes without any
    ground truth get AP None (excluded from the mean). `protocol` selects
    the all-point interpolated area or the 11-point variant.
    """
    if protocol not in ("all", "11pt"):
        raise ValueError(f"unknown AP protocol {protocol!r}")
    truth = list(truth)
    detections = list(detections)
    classes = sorted(
        {l for r in truth for l in r.labels} | {d.label for d in detections}
    )
    result: dict[int, Optional[float]] = {}
    for cls in classes:
        gt_boxes: dict[str, list[BoundingBox]] = {}
        for r in truth:
            boxes = [b for b, l in zip(r.boxes, r.labels) if l == cls]
            if boxes:
                gt_boxes[r.image_id] = boxes
        n_gt = sum(len(v) for v in gt_boxes.values())
        if n_gt == 0:
            result[cls] = None
            continue
        dets = [d for d in detections if d.label == cls]
        order = np.argsort([-d.confidence for d in dets], kind="stable")
        matched: dict[str, list[bool]] = {k: [False] * len(v) for k, v in gt_boxes.items()}
        tp = np.zeros(len(dets))
        fp = np.zeros(len(dets))
        for rank, idx in enumerate(order):
            det = dets[int(idx)]
            candidates = gt_boxes.get(det.image_id, [])
            best_iou, best_j = 0.0, -1
            for j, g in enumerate(candidates):
                v = iou(det.box, g)
                if v > best_iou:
                    best_iou, best_j = v, j
            if best_j >= 0 and best_iou >= iou_threshold and not matched[det.image_id][best_j]:
                matched[det.image_id][best_j] = True
                tp[rank] = 1.0
            else:
                fp[rank] = 1.0
        if len(dets) == 0:
            result[cls] = 0.0
            continue
        tp_cum = np.cumsum(tp)
        fp_cum = np.cumsum(fp)
        recall = tp_cum / n_gt
        precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
        result[cls] = (
            _interp_ap_all(recall, precision)
            if protocol == "all"
            else _interp_ap_11pt(recall, precision)
        )
    return result


def mean_average_precision(per_class: dict[int, Optional[float]]) -> float:
    values = [v for v in per_class.values() if v is not None]
    if not values:
        return 0.0
    return float(np.mean(values))


def infer_detections(
    model: DisentangledDetector,
    images: torch.Tensor,
    image_ids: list[str],
    channel_means: tuple[float, float, float],
    top_k: int = 16,
    score_floor: float = 0.05,
    nms_threshold: float = 0.5,
    batch_size: int = 32,
) -> list[Detection]:
    """Run the detector over uint8 images and return thresholded,
    per-class-suppressed detections."""
    cfg = model.config
    means = torch.tensor(channel_means).view(1, 3, 1, 1)
    out: list[Detection] = []
    model.eval()
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            chunk = images[start : start + batch_size].float() / 255.0 - means
            state = model.forward_maps(chunk)
            proposals = model.propose(state.f_di2, top_k=top_k)
            if len(proposals) == 0:
                continue
            crops = roi_align(state.f_di2, proposals, cfg.roi_size, cfg.feature_stride)
            logits, deltas = model.d_di(crops)
            probs = torch.softmax(logits, dim=1)
            for i in range(chunk.shape[0]):
                mask = proposals.batch_index == i
                if not mask.any():
                    continue
                img_boxes = proposals.boxes[mask]
                img_probs = probs[mask]
                img_deltas = deltas[mask]
                for cls in range(cfg.num_classes):
                    scores = img_probs[:, cls + 1]
                    keep = scores >= score_floor
                    if not keep.any():
                        continue
                    boxes = decode_deltas(img_boxes[keep], img_deltas[keep, cls])
                    boxes[:, 0::2] = boxes[:, 0::2].clamp(0, cfg.image_size)
                    boxes[:, 1::2] = boxes[:, 1::2].clamp(0, cfg.image_size)
                    scores = scores[keep]
                    valid = (boxes[:, 2] - boxes[:, 0] > 1e-3) & (
                        boxes[:, 3] - boxes[:, 1] > 1e-3
                    )
                    boxes, scores = boxes[valid], scores[valid]
                    if boxes.shape[0] == 0:
                        continue
                    kept = nms(boxes, scores, nms_threshold)
                    for j in kept.tolist():
                        out.append(
                            Detection(
                                image_id=image_ids[start + i],
                                box=BoundingBox(*(float(v) for v in boxes[j])),
                                label=cls,
                                confidence=float(scores[j]),
                            )
                        )
    return out


def write_detections(path: Path, detections: list[Detection]) -> None:
    lines = [
        json.dumps(
            {
                "image_id": d.image_id,
                "box": list(d.box.as_tuple()),
                "label": d.label,
                "confidence": d.confidence,
            },
            sort_keys=True,
        )
        for d in detections
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_detections(path: Path) -> list[Detection]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        raw = json.loads(line)
        out.append(
            Detection(
                image_id=raw["image_id"],
                box=BoundingBox(*raw["box"]),
                label=int(raw["label"]),
                confidence=float(raw["confidence"]),
            )
        )
    return out


def evaluate(
    checkpoint,
    data_dir: Path,
    iou_threshold: float = 0.5,
    protocol: str = "all",
    detections_path: Optional[Path] = None,
    top_k: int = 16,
) -> APResult:
    """Score a trained model on a dataset directory.

    `checkpoint` is a checkpoint file path or an already-built
    (model, channel_means) pair. Per-image detections are written as JSON
    lines when `detections_path` is given, so scores can be replayed
    offline through `average_precision`.
    """
    if isinstance(checkpoint, (str, Path)):
        from .training import load_model  # deferred: training builds on this module

        model, channel_means = load_model(Path(checkpoint))
    else:
        model, channel_means = checkpoint
    data = load_dataset(Path(data_dir), sealed=True)
    if len(data) == 0:
        raise ValueError(f"empty dataset under {data_dir}")
    max_label = max((l for r in data.records for l in r.labels), default=-1)
    if max_label >= model.config.num_classes:
        raise ConfigurationError(
            f"dataset labels up to {max_label} exceed model classes {model.config.num_classes}"
        )
    detections = infer_detections(
        model,
        data.images,
        [r.image_id for r in data.records],
        channel_means,
        top_k=top_k,
    )
    if detections_path is not None:
        write_detections(detections_path, detections)
    per_class = average_precision(detections, data.records, iou_threshold, protocol)
    return APResult(
        per_class=per_class,
        mean_ap=mean_average_precision(per_class),
        iou_threshold=iou_threshold,
        protocol=protocol,
    )
