"""Class-frequency-driven augmentation (ACmix) and geometric augmentation.

Rare classes get two kinds of help. Images containing them have their
contrast stretched in proportion to the class rarity. Minority objects
are also cut from donor images and pasted, partly blended, into other
training images.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import AnnotatedImage, LabelRecord
from .kernels import iou_matrix
from .tensor import RandomSource

logger = logging.getLogger(__name__)

PLACEMENT_ATTEMPTS = 50
GEOMETRIC_OPS = ("crop", "scale", "rotate90", "hflip", "vflip")


@dataclass
class ClassFrequencyTable:
    counts: dict

    @property
    def total(self) -> int:
        return int(sum(self.counts.values()))

    def frequency(self, class_id: int) -> float:
        """``count / max count``; unseen classes count as common (1.0)."""
        top = max(self.counts.values())
        c = self.counts.get(class_id)
        return 1.0 if c is None else c / top

    @property
    def frequencies(self) -> dict:
        return {c: self.frequency(c) for c in self.counts}

    def minority_classes(self) -> set:
        return {c for c in self.counts if self.frequency(c) < 1.0}


def compute_class_frequencies(dataset) -> ClassFrequencyTable:
    counts: dict = {}
    for img in dataset:
        for r in img.labels:
            counts[r.class_id] = counts.get(r.class_id, 0) + 1
    if not counts:
        raise ValueError("dataset has no labelled instances")
    return ClassFrequencyTable(dict(sorted(counts.items())))


def contrast_factor(img: AnnotatedImage, table: ClassFrequencyTable, strength: float) -> float:
    if strength < 0:
        raise ValueError("strength must be nonnegative")
    if not img.labels:
        return 1.0
    rarity = 1.0 - min(table.frequency(r.class_id) for r in img.labels)
    return 1.0 + strength * rarity


def contrast_adjust(img: AnnotatedImage, table: ClassFrequencyTable, strength: float) -> AnnotatedImage:
    """Stretch contrast about 128 by ``1 + strength * (1 - f_min)``."""
    gamma = contrast_factor(img, table, strength)
    if gamma == 1.0:
        return img.copy()
    v = img.pixels.astype(np.float64)
    out = np.clip(np.rint(128.0 + gamma * (v - 128.0)), 0, 255).astype(np.uint8)
    return AnnotatedImage(out, list(img.labels), img.image_id)


# ---------------------------------------------------------------------------
# sample mixing


@dataclass
class MixRecipe:
    donor: str
    recipient: str
    beta: float
    pasted: list = field(default_factory=list)  # normalised xyxy boxes + class
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "donor": self.donor,
            "recipient": self.recipient,
            "beta": self.beta,
            "pasted": [list(p) for p in self.pasted],
            "warnings": list(self.warnings),
        }


def _pixel_box(rec: LabelRecord, w: int, h: int) -> tuple:
    x1, y1, x2, y2 = rec.to_pixels(w, h)
    x1, y1 = int(np.floor(x1 + 1e-9)), int(np.floor(y1 + 1e-9))
    x2, y2 = int(np.ceil(x2 - 1e-9)), int(np.ceil(y2 - 1e-9))
    return max(0, x1), max(0, y1), min(w, x2), min(h, y2)


def mix_samples(
    donor: AnnotatedImage,
    recipient: AnnotatedImage,
    rng: RandomSource,
    beta_param: float = 1.0,
    table: ClassFrequencyTable | None = None,
    beta: float | None = None,
) -> tuple:
    """Paste the donor's minority objects into the recipient.

    Returns ``(image, recipe)``. The blend weight ``beta`` is drawn from
    ``Beta(beta_param, beta_param)`` and folded onto ``[0, 0.5]`` so the
    pasted object always dominates its region; pass ``beta`` to force it.
    Inside every pasted region ``out = beta * recipient + (1 - beta) * donor``.
    """
    if beta is None:
        b = float(rng.beta(beta_param, beta_param))
        beta = min(b, 1.0 - b)
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    minority = table.minority_classes() if table is not None else None
    candidates = [r for r in donor.labels if minority is None or r.class_id in minority]
    recipe = MixRecipe(donor.image_id, recipient.image_id, float(beta))
    out = recipient.pixels.astype(np.float64)
    labels = list(recipient.labels)
    H, W = recipient.height, recipient.width
    occupied = [r.xyxy() for r in labels]
    for rec in candidates:
        x1, y1, x2, y2 = _pixel_box(rec, donor.width, donor.height)
        bw, bh = x2 - x1, y2 - y1
        if bw < 1 or bh < 1 or bw > W or bh > H:
            recipe.warnings.append(f"object {rec} cannot fit the recipient")
            continue
        placed = None
        for _ in range(PLACEMENT_ATTEMPTS):
            px = int(rng.integers(0, W - bw + 1))
            py = int(rng.integers(0, H - bh + 1))
            cand = (px / W, py / H, (px + bw) / W, (py + bh) / H)
            if not occupied or np.max(iou_matrix([cand], occupied)) <= 0.0:
                placed = (px, py, cand)
                break
        if placed is None:
            msg = f"no free placement for class {rec.class_id} after {PLACEMENT_ATTEMPTS} attempts"
            recipe.warnings.append(msg)
            logger.warning(msg)
            continue
        px, py, cand = placed
        crop = donor.pixels[y1:y2, x1:x2].astype(np.float64)
        region = out[py:py + bh, px:px + bw]
        out[py:py + bh, px:px + bw] = beta * region + (1.0 - beta) * crop
        occupied.append(cand)
        labels.append(LabelRecord.from_xyxy(rec.class_id, *cand))
        recipe.pasted.append((rec.class_id, *cand))
    pixels = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return AnnotatedImage(pixels, labels, f"{recipient.image_id}+{donor.image_id}"), recipe


# ---------------------------------------------------------------------------
# geometric augmentation


def _resize_nearest(pixels: np.ndarray, h: int, w: int) -> np.ndarray:
    H, W = pixels.shape[:2]
    rows = np.minimum((np.arange(h) + 0.5) * H / h, H - 1).astype(int)
    cols = np.minimum((np.arange(w) + 0.5) * W / w, W - 1).astype(int)
    return pixels[rows][:, cols]


def _remap_labels(labels, fn, min_keep: float = 0.5) -> list:
    """Apply ``fn`` to normalised xyxy corners, clamp, drop boxes below ``min_keep`` area."""
    out = []
    for r in labels:
        x1, y1, x2, y2 = fn(*r.xyxy())
        full = (x2 - x1) * (y2 - y1)
        cx1, cy1, cx2, cy2 = max(0.0, x1), max(0.0, y1), min(1.0, x2), min(1.0, y2)
        if cx2 <= cx1 or cy2 <= cy1:
            continue
        if (cx2 - cx1) * (cy2 - cy1) < min_keep * full:
            continue
        out.append(LabelRecord.from_xyxy(r.class_id, cx1, cy1, cx2, cy2))
    return out


def hflip(img: AnnotatedImage) -> AnnotatedImage:
    labels = [LabelRecord(r.class_id, 1.0 - r.cx, r.cy, r.w, r.h) for r in img.labels]
    return AnnotatedImage(img.pixels[:, ::-1].copy(), labels, img.image_id)


def vflip(img: AnnotatedImage) -> AnnotatedImage:
    labels = [LabelRecord(r.class_id, r.cx, 1.0 - r.cy, r.w, r.h) for r in img.labels]
    return AnnotatedImage(img.pixels[::-1].copy(), labels, img.image_id)


def rotate90(img: AnnotatedImage) -> AnnotatedImage:
    """Quarter turn counter-clockwise."""
    labels = [LabelRecord(r.class_id, r.cy, 1.0 - r.cx, r.h, r.w) for r in img.labels]
    return AnnotatedImage(np.rot90(img.pixels).copy(), labels, img.image_id)


def crop(img: AnnotatedImage, x0: int, y0: int, cw: int, ch: int) -> AnnotatedImage:
    """Crop a window and resize it back to the original size."""
    if cw < 8 or ch < 8:
        raise ValueError(f"crop window {cw}x{ch} is smaller than 8x8")
    H, W = img.height, img.width
    if x0 < 0 or y0 < 0 or x0 + cw > W or y0 + ch > H:
        raise ValueError("crop window outside the image")
    pixels = _resize_nearest(img.pixels[y0:y0 + ch, x0:x0 + cw], H, W)
    sx, sy = W / cw, H / ch
    ox, oy = x0 / W, y0 / H

    def fn(x1, y1, x2, y2):
        return (x1 - ox) * sx, (y1 - oy) * sy, (x2 - ox) * sx, (y2 - oy) * sy

    return AnnotatedImage(pixels, _remap_labels(img.labels, fn), img.image_id)


def rescale(img: AnnotatedImage, factor: float) -> AnnotatedImage:
    """Zoom about the centre, keeping the canvas size (padding with the mean colour)."""
    H, W = img.height, img.width
    nh, nw = max(1, int(round(H * factor))), max(1, int(round(W * factor)))
    scaled = _resize_nearest(img.pixels, nh, nw)
    canvas = np.empty_like(img.pixels)
    canvas[:] = img.pixels.reshape(-1, 3).mean(axis=0).astype(np.uint8)
    # top-left of the scaled image in canvas coordinates
    oy, ox = (H - nh) // 2, (W - nw) // 2
    sy0, sx0 = max(0, -oy), max(0, -ox)
    dy0, dx0 = max(0, oy), max(0, ox)
    hh, ww = min(nh - sy0, H - dy0), min(nw - sx0, W - dx0)
    canvas[dy0:dy0 + hh, dx0:dx0 + ww] = scaled[sy0:sy0 + hh, sx0:sx0 + ww]
    fx, fy = nw / W, nh / H

    def fn(x1, y1, x2, y2):
        return (x1 * fx * W + ox) / W, (y1 * fy * H + oy) / H, (x2 * fx * W + ox) / W, (y2 * fy * H + oy) / H

    return AnnotatedImage(canvas, _remap_labels(img.labels, fn), img.image_id)


def geometric_augment(img: AnnotatedImage, rng: RandomSource, ops, p: float = 0.5) -> AnnotatedImage:
    """Apply each requested op (fixed order) with probability ``p``.

    Pixels and labels go through the same mapping; boxes left with less
    than half their area are dropped.
    """
    ops = set(ops)
    unknown = ops - set(GEOMETRIC_OPS)
    if unknown:
        raise ValueError(f"unknown geometric ops {sorted(unknown)}")
    out = img
    for op in GEOMETRIC_OPS:
        if op not in ops or rng.random() >= p:
            continue
        if op == "crop":
            H, W = out.height, out.width
            frac = rng.uniform(0.7, 1.0)
            cw, ch = max(8, int(W * frac)), max(8, int(H * frac))
            x0 = int(rng.integers(0, W - cw + 1))
            y0 = int(rng.integers(0, H - ch + 1))
            out = crop(out, x0, y0, cw, ch)
        elif op == "scale":
            out = rescale(out, float(rng.uniform(0.8, 1.2)))
        elif op == "rotate90":
            out = rotate90(out)
        elif op == "hflip":
            out = hflip(out)
        else:
            out = vflip(out)
    return out if out is not img else img.copy()


# ---------------------------------------------------------------------------
# full augmentation pass


@dataclass
class AcmixConfig:
    multiplier: int = 2
    strength: float = 0.5
    beta_param: float = 1.0
    geometric_ops: tuple = ()

    def __post_init__(self):
        if self.multiplier < 1:
            raise ValueError("augmentation multiplier must be >= 1")
        if self.strength < 0:
            raise ValueError("contrast strength must be nonnegative")


class AugmentedSet(list):
    """List of images plus a JSON-ready manifest of how each was made."""

    def __init__(self, items=(), manifest=None):
        super().__init__(items)
        self.manifest = manifest or []


def build_augmented_set(dataset, table: ClassFrequencyTable, config: AcmixConfig, rng: RandomSource) -> AugmentedSet:
    """Originals (contrast-adjusted) plus ``(multiplier - 1) * len(dataset)`` mixed samples."""
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty dataset")
    out = AugmentedSet()
    for img in dataset:
        out.append(contrast_adjust(img, table, config.strength))
        out.manifest.append({"id": img.image_id, "source": "original", "gamma": contrast_factor(img, table, config.strength)})
    if config.multiplier == 1:
        return out
    minority = table.minority_classes()
    donors = [i for i, img in enumerate(dataset) if any(r.class_id in minority for r in img.labels)]
    if not donors:
        return out
    for k in range((config.multiplier - 1) * len(dataset)):
        sub = rng.derive(k)
        recipient = dataset[int(sub.integers(0, len(dataset)))]
        donor = dataset[donors[int(sub.integers(0, len(donors)))]]
        mixed, recipe = mix_samples(donor, recipient, sub, config.beta_param, table)
        mixed = contrast_adjust(mixed, table, config.strength)
        if config.geometric_ops:
            mixed = geometric_augment(mixed, sub, config.geometric_ops)
        mixed.image_id = f"mix_{k:05d}"
        out.append(mixed)
        out.manifest.append({"id": mixed.image_id, "source": "mix", "seed": sub.seed, "recipe": recipe.to_dict()})
    return out
