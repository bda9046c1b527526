"""Deterministic two-domain synthetic detection benchmark (Shapes2D).

Scenes are colored shapes (circle, square, triangle) on a muted
background. The same scene seed always produces the same geometry; a
domain style only re-renders appearance (hue rotation, additive fog,
value noise), never geometry, so paired source/target renders share
bit-identical boxes.
"""

from __future__ import annotations

import math
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .boxes import AnnotatedBox, BoundingBox, ImageRecord, iou, read_manifest, write_manifest

CLASS_NAMES = ("circle", "square", "triangle")

# Mean fill fraction of each shape inside its box, used by the template
# heuristic: circle pi/4, square 1, triangle 1/2.
_FILL_RATIOS = {0: math.pi / 4.0, 1: 1.0, 2: 0.5}

_SUPERSAMPLE = 4
_FOG_GRAY = 0.82
# Ground-truth boxes are kept disjoint with a small margin (well under
# the 0.3 pairwise-IoU ceiling) so fill fractions stay clean.
_BOX_MARGIN = 1.0


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 4
    min_size_frac: float = 0.2
    max_size_frac: float = 0.4
    # Class-conditioned hues packed into one third of the wheel. The
    # target style's hue rotation moves the whole object palette into a
    # range never seen in source renders, so a detector that keys on
    # absolute color transfers badly, while shape cues are
    # style-invariant and color is a usable domain signal for alignment.
    class_hue_centers: tuple[float, ...] = (0.0, 1.0 / 9.0, 2.0 / 9.0)
    class_hue_spread: float = 0.03
    seed: int = 0

    def __post_init__(self) -> None:
        if not (1 <= self.min_objects <= self.max_objects):
            raise ValueError("invalid object count range")
        if not (0 < self.min_size_frac <= self.max_size_frac < 1):
            raise ValueError("invalid size fraction range")


@dataclass(frozen=True)
class DomainStyle:
    """Appearance-only transform. Never moves object geometry."""

    style_id: str
    hue_rotation: float = 0.0
    fog_alpha: float = 0.0
    noise_amplitude: float = 0.0
    saturation_scale: float = 1.0
    value_scale: float = 1.0

    @staticmethod
    def source() -> "DomainStyle":
        return DomainStyle(style_id="source")

    @staticmethod
    def target() -> "DomainStyle":
        return DomainStyle(
            style_id="target", hue_rotation=120.0, fog_alpha=0.35, noise_amplitude=0.1
        )

    @property
    def domain_tag(self) -> int:
        return 0 if self.style_id == "source" else 1


def _hsv_to_rgb(h: float, s: float, v: float) -> tuple[float, float, float]:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def _sample_scene(spec: SceneSpec, rng: np.random.Generator):
    """Geometry and base colors for one scene; style-independent."""
    size = spec.image_size
    background = _hsv_to_rgb(rng.uniform(), rng.uniform(0.05, 0.25), rng.uniform(0.3, 0.7))
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    objects: list[tuple[int, BoundingBox, tuple[float, float, float]]] = []
    for _ in range(count):
        label = int(rng.integers(0, len(CLASS_NAMES)))
        for _attempt in range(60):
            side = rng.uniform(spec.min_size_frac, spec.max_size_frac) * size
            x0 = rng.uniform(0, size - side)
            y0 = rng.uniform(0, size - side)
            box = BoundingBox(x0, y0, x0 + side, y0 + side)
            padded = BoundingBox(
                max(x0 - _BOX_MARGIN, 0.0),
                max(y0 - _BOX_MARGIN, 0.0),
                min(x0 + side + _BOX_MARGIN, float(size)),
                min(y0 + side + _BOX_MARGIN, float(size)),
            )
            if all(iou(padded, other) == 0.0 for _, other, _ in objects):
                break
        else:
            continue
        hue_center = spec.class_hue_centers[label % len(spec.class_hue_centers)]
        while True:
            hue = (hue_center + rng.normal(0.0, spec.class_hue_spread)) % 1.0
            color = _hsv_to_rgb(hue, rng.uniform(0.55, 0.95), rng.uniform(0.55, 0.95))
            if sum(abs(c - b) for c, b in zip(color, background)) > 0.9:
                break
        objects.append((label, box, color))
    return background, objects


def _render_scene(spec: SceneSpec, background, objects) -> np.ndarray:
    """Supersampled rasterization; returns float RGB in [0,1]."""
    big = spec.image_size * _SUPERSAMPLE
    img = Image.new("RGB", (big, big), tuple(int(round(c * 255)) for c in background))
    draw = ImageDraw.Draw(img)
    for label, box, color in objects:
        c = tuple(int(round(v * 255)) for v in color)
        x0, y0, x1, y1 = (v * _SUPERSAMPLE for v in box.as_tuple())
        if label == 0:
            draw.ellipse([x0, y0, x1, y1], fill=c)
        elif label == 1:
            draw.rectangle([x0, y0, x1, y1], fill=c)
        else:
            draw.polygon([(x0, y1), (x1, y1), ((x0 + x1) / 2, y0)], fill=c)
    img = img.resize((spec.image_size, spec.image_size), Image.LANCZOS)
    return np.asarray(img, dtype=np.float64) / 255.0


def _value_noise(size: int, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Smooth value noise: coarse Gaussian grid, bilinear upsample."""
    coarse = rng.normal(0.0, 1.0, size=(size // 8 + 1, size // 8 + 1))
    field = Image.fromarray(coarse.astype(np.float32), mode="F").resize(
        (size, size), Image.BILINEAR
    )
    return amplitude * np.asarray(field, dtype=np.float64)


def _apply_style(img: np.ndarray, style: DomainStyle, rng: np.random.Generator) -> np.ndarray:
    out = img
    if style.hue_rotation or style.saturation_scale != 1.0 or style.value_scale != 1.0:
        as_uint8 = np.clip(np.rint(out * 255.0), 0, 255).astype(np.uint8)
        hsv = np.asarray(Image.fromarray(as_uint8).convert("HSV"), dtype=np.float64)
        hsv[..., 0] = np.mod(hsv[..., 0] + style.hue_rotation / 360.0 * 256.0, 256.0)
        hsv[..., 1] = np.clip(hsv[..., 1] * style.saturation_scale, 0, 255)
        hsv[..., 2] = np.clip(hsv[..., 2] * style.value_scale, 0, 255)
        rgb = Image.fromarray(np.rint(hsv).astype(np.uint8), mode="HSV").convert("RGB")
        out = np.asarray(rgb, dtype=np.float64) / 255.0
    if style.fog_alpha:
        out = (1.0 - style.fog_alpha) * out + style.fog_alpha * _FOG_GRAY
    if style.noise_amplitude:
        out = out + _value_noise(out.shape[0], style.noise_amplitude, rng)[..., None]
    return np.clip(out, 0.0, 1.0)


def render_image(spec: SceneSpec, style: DomainStyle, index: int) -> tuple[np.ndarray, list[AnnotatedBox]]:
    """One styled image plus its annotations, fully determined by
    (spec.seed, index, style)."""
    scene_rng = np.random.default_rng([spec.seed, index])
    style_rng = np.random.default_rng([spec.seed, index, 7, style.domain_tag])
    background, objects = _sample_scene(spec, scene_rng)
    img = _render_scene(spec, background, objects)
    img = _apply_style(img, style, style_rng)
    annotations = [AnnotatedBox(box, label) for label, box, _ in objects]
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8), annotations


def generate(
    spec: SceneSpec, style: DomainStyle, n_images: int, split: str, out_dir: Path
) -> Path:
    """Write a dataset directory: images/ plus a JSON-lines manifest.

    For the target-domain train split the training manifest carries no
    boxes or labels; the full annotations go to a sealed eval manifest
    used only for scoring. Writing is atomic: everything lands in a
    temporary directory that is renamed into place at the end.
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    if split not in ("train", "eval"):
        raise ValueError(f"unknown split {split!r}")
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=out_dir.name + ".", dir=out_dir.parent))
    try:
        image_dir = staging / "images"
        image_dir.mkdir()
        records: list[ImageRecord] = []
        for index in range(n_images):
            pixels, annotations = render_image(spec, style, index)
            image_id = f"{style.style_id}_{split}_{index:05d}"
            Image.fromarray(pixels).save(image_dir / f"{image_id}.png")
            records.append(
                ImageRecord(
                    image_id=image_id,
                    boxes=tuple(a.box for a in annotations),
                    labels=tuple(a.label for a in annotations),
                    domain=style.domain_tag,
                )
            )
        unlabeled = style.domain_tag == 1 and split == "train"
        if unlabeled:
            public = [
                ImageRecord(r.image_id, (), (), r.domain) for r in records
            ]
            write_manifest(staging / "annotations.jsonl", public)
            write_manifest(staging / "eval_annotations.jsonl", records)
        else:
            write_manifest(staging / "annotations.jsonl", records)
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(staging, out_dir)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    return out_dir


@dataclass
class LoadedDataset:
    images: torch.Tensor  # (n, 3, h, w) uint8
    records: list[ImageRecord]

    @property
    def annotations(self) -> tuple[tuple[AnnotatedBox, ...], ...]:
        return tuple(r.annotated() for r in self.records)

    def __len__(self) -> int:
        return len(self.records)


def load_dataset(directory: Path, sealed: bool = False) -> LoadedDataset:
    """Read a generated dataset directory into memory.

    With sealed=True the eval manifest (full boxes) is preferred when
    present; otherwise the public training manifest is used.
    """
    directory = Path(directory)
    manifest = directory / "annotations.jsonl"
    if sealed and (directory / "eval_annotations.jsonl").exists():
        manifest = directory / "eval_annotations.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"no annotation manifest under {directory}")
    records = read_manifest(manifest)
    arrays = []
    for r in records:
        with Image.open(directory / "images" / f"{r.image_id}.png") as im:
            arrays.append(np.asarray(im.convert("RGB"), dtype=np.uint8))
    images = torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2).contiguous()
    return LoadedDataset(images=images, records=records)


def template_class_heuristic(pixels: np.ndarray, box: BoundingBox) -> int:
    """Recover the class of a rendered object from its fill fraction.

    Estimates the background from the image border, masks box pixels that
    differ from it, and picks the class whose nominal fill fraction is
    closest. A sanity floor for dataset learnability, not a detector.
    """
    img = pixels.astype(np.float64) / 255.0
    border = np.concatenate([img[0], img[-1], img[:, 0], img[:, -1]], axis=0)
    background = np.median(border, axis=0)
    x0, y0, x1, y1 = (int(round(v)) for v in box.as_tuple())
    patch = img[max(y0, 0):y1, max(x0, 0):x1]
    if patch.size == 0:
        return 1
    fill = float((np.abs(patch - background).sum(axis=2) > 0.25).mean())
    return min(_FILL_RATIOS, key=lambda c: abs(_FILL_RATIOS[c] - fill))
