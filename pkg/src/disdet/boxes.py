"""Box geometry, batch containers, and the annotation manifest format.

Boxes are axis-aligned corner boxes (x_min, y_min, x_max, y_max) in
continuous pixel coordinates. Invalid geometry is rejected at construction
so downstream code never has to branch on degenerate boxes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch


class DegenerateBoxError(ValueError):
    """Box has no positive area (empty, inverted, or clipped fully outside)."""


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise DegenerateBoxError(f"non-finite coordinates {coords}")
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise DegenerateBoxError(f"empty box {coords}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class AnnotatedBox:
    box: BoundingBox
    label: int

    def __post_init__(self) -> None:
        if self.label < 0:
            raise ValueError(f"negative class label {self.label}")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes; 0.0 when disjoint."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def clip_box(b: BoundingBox, width: float, height: float) -> BoundingBox:
    """Clamp a box into [0, width] x [0, height].

    Raises DegenerateBoxError when the clipped box has no area, i.e. the
    proposal lies entirely outside the image.
    """
    if width <= 0 or height <= 0:
        raise ValueError(f"invalid image bounds {width}x{height}")
    x_min = min(max(b.x_min, 0.0), width)
    y_min = min(max(b.y_min, 0.0), height)
    x_max = min(max(b.x_max, 0.0), width)
    y_max = min(max(b.y_max, 0.0), height)
    if x_min >= x_max or y_min >= y_max:
        raise DegenerateBoxError(f"box {b.as_tuple()} outside {width}x{height} image")
    return BoundingBox(x_min, y_min, x_max, y_max)


def box_iou_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU between (n,4) and (m,4) corner-format box tensors."""
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return torch.where(union > 0, inter / union, torch.zeros_like(inter))


@dataclass(frozen=True)
class ProposalSet:
    """Scored candidate boxes, already clipped to image bounds.

    `boxes` is (k,4) in image-pixel corner format, `objectness` (k,) in
    [0,1] sorted non-increasing, `batch_index` (k,) maps each box to its
    image within the producing batch.
    """

    boxes: torch.Tensor
    objectness: torch.Tensor
    batch_index: torch.Tensor

    def __post_init__(self) -> None:
        k = self.boxes.shape[0]
        if self.boxes.ndim != 2 or self.boxes.shape[1] != 4:
            raise ValueError(f"boxes must be (k,4), got {tuple(self.boxes.shape)}")
        if self.objectness.shape != (k,) or self.batch_index.shape != (k,):
            raise ValueError("objectness/batch_index length mismatch")

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def for_image(self, index: int) -> "ProposalSet":
        keep = self.batch_index == index
        return ProposalSet(self.boxes[keep], self.objectness[keep], self.batch_index[keep])

    @staticmethod
    def empty() -> "ProposalSet":
        return ProposalSet(
            torch.zeros((0, 4)), torch.zeros((0,)), torch.zeros((0,), dtype=torch.long)
        )


@dataclass(frozen=True)
class DomainBatch:
    """One training mini-batch: annotated source images plus unlabeled targets.

    Domain tag convention: 0 for source, 1 for target. Target images never
    carry annotations at train time.
    """

    source_images: torch.Tensor
    source_annotations: tuple[tuple[AnnotatedBox, ...], ...]
    target_images: torch.Tensor

    def __post_init__(self) -> None:
        if self.source_images.shape[0] != len(self.source_annotations):
            raise ValueError("one annotation list required per source image")

    @property
    def domain_tags(self) -> torch.Tensor:
        n_s = self.source_images.shape[0]
        n_t = self.target_images.shape[0]
        return torch.cat([torch.zeros(n_s, dtype=torch.long), torch.ones(n_t, dtype=torch.long)])


@dataclass(frozen=True)
class ImageRecord:
    """One line of the annotation manifest."""

    image_id: str
    boxes: tuple[BoundingBox, ...]
    labels: tuple[int, ...]
    domain: int

    def annotated(self) -> tuple[AnnotatedBox, ...]:
        return tuple(AnnotatedBox(b, l) for b, l in zip(self.boxes, self.labels))


def write_manifest(path: Path, records: list[ImageRecord]) -> None:
    lines = []
    for r in records:
        lines.append(
            json.dumps(
                {
                    "image_id": r.image_id,
                    "boxes": [list(b.as_tuple()) for b in r.boxes],
                    "labels": list(r.labels),
                    "domain": r.domain,
                },
                sort_keys=True,
            )
        )
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def read_manifest(path: Path) -> list[ImageRecord]:
    records = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        raw = json.loads(line)
        records.append(
            ImageRecord(
                image_id=raw["image_id"],
                boxes=tuple(BoundingBox(*b) for b in raw["boxes"]),
                labels=tuple(int(l) for l in raw["labels"]),
                domain=int(raw["domain"]),
            )
        )
    return records
