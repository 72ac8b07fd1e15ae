"""Annotated images, YOLO label files, P6 pixmaps and the synthetic dataset.

Label files hold one object per line, ``class_id cx cy w h``, with every
coordinate normalised to ``[0, 1]``.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import RandomSource

BOUNDS_TOL = 1e-6


class LabelFormatError(ValueError):
    """Malformed or out-of-range label file content."""


@dataclass(frozen=True)
class LabelRecord:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def validate(self) -> None:
        for fname, val in (("cx", self.cx), ("cy", self.cy), ("width", self.w), ("height", self.h)):
            if not (0.0 <= val <= 1.0) or not np.isfinite(val):
                raise LabelFormatError(f"{fname} out of range [0, 1]: {val}")
        if self.w <= 0 or self.h <= 0:
            raise LabelFormatError(f"box must have positive area, got w={self.w} h={self.h}")
        x1, y1, x2, y2 = self.xyxy()
        if x1 < -BOUNDS_TOL or y1 < -BOUNDS_TOL or x2 > 1 + BOUNDS_TOL or y2 > 1 + BOUNDS_TOL:
            raise LabelFormatError(f"box {self} extends outside the unit square")
        if self.class_id < 0:
            raise LabelFormatError(f"class id must be nonnegative, got {self.class_id}")

    def xyxy(self) -> tuple:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def to_pixels(self, width: int, height: int) -> tuple:
        x1, y1, x2, y2 = self.xyxy()
        return (x1 * width, y1 * height, x2 * width, y2 * height)

    @classmethod
    def from_xyxy(cls, class_id: int, x1, y1, x2, y2) -> "LabelRecord":
        """Normalised corners -> record, clamped into the unit square."""
        x1, y1 = max(0.0, float(x1)), max(0.0, float(y1))
        x2, y2 = min(1.0, float(x2)), min(1.0, float(y2))
        return cls(int(class_id), (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


@dataclass
class AnnotatedImage:
    pixels: np.ndarray  # H x W x 3 uint8
    labels: list = field(default_factory=list)
    image_id: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"pixels must be H x W x 3, got {self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            self.pixels = np.clip(np.rint(self.pixels), 0, 255).astype(np.uint8)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def copy(self) -> "AnnotatedImage":
        return AnnotatedImage(self.pixels.copy(), list(self.labels), self.image_id)


# ---------------------------------------------------------------------------
# label files


def parse_yolo_labels(text: str, source: str = "<string>") -> list:
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 5:
            raise LabelFormatError(f"{source}:{lineno}: expected 5 fields, got {len(parts)}")
        try:
            cls_f = float(parts[0])
            vals = [float(p) for p in parts[1:]]
        except ValueError:
            raise LabelFormatError(f"{source}:{lineno}: non-numeric field in {line!r}") from None
        if cls_f != int(cls_f):
            raise LabelFormatError(f"{source}:{lineno}: class id must be an integer, got {parts[0]}")
        rec = LabelRecord(int(cls_f), *vals)
        try:
            rec.validate()
        except LabelFormatError as exc:
            raise LabelFormatError(f"{source}:{lineno}: {exc}") from None
        records.append(rec)
    return records


def load_yolo_labels(path) -> list:
    path = Path(path)
    return parse_yolo_labels(path.read_text(), str(path))


def format_yolo_labels(records) -> str:
    return "".join(f"{r.class_id} {r.cx:.6f} {r.cy:.6f} {r.w:.6f} {r.h:.6f}\n" for r in records)


def write_yolo_labels(path, records) -> None:
    Path(path).write_text(format_yolo_labels(records))


# ---------------------------------------------------------------------------
# P6 pixmaps


def encode_ppm(pixels: np.ndarray) -> bytes:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w, _ = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def write_ppm(path, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(pixels))


def decode_ppm(blob: bytes) -> np.ndarray:
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated P6 header")
        tokens.append(blob[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"not a P6 pixmap (magic {tokens[0]!r})")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    payload = blob[pos:pos + 3 * w * h]
    if len(payload) != 3 * w * h:
        raise ValueError(f"P6 payload has {len(payload)} bytes, expected {3 * w * h}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# dataset layout


@dataclass
class DatasetManifest:
    """On-disk dataset: ``images/<id>.ppm``, ``labels/<id>.txt``, ``manifest.json``."""

    root: str
    splits: dict
    class_names: list
    images: dict = field(default_factory=dict, repr=False)  # id -> AnnotatedImage (in-memory cache)
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def image_path(self, image_id: str) -> Path:
        return Path(self.root) / "images" / f"{image_id}.ppm"

    def label_path(self, image_id: str) -> Path:
        return Path(self.root) / "labels" / f"{image_id}.txt"

    def load(self, image_id: str) -> AnnotatedImage:
        if image_id not in self.images:
            labels = load_yolo_labels(self.label_path(image_id))
            for r in labels:
                if r.class_id >= self.num_classes:
                    raise LabelFormatError(f"{image_id}: class id {r.class_id} >= class count {self.num_classes}")
            self.images[image_id] = AnnotatedImage(read_ppm(self.image_path(image_id)), labels, image_id)
        return self.images[image_id]

    def split(self, name: str) -> list:
        return [self.load(i) for i in self.splits.get(name, [])]

    def manifest_bytes(self) -> bytes:
        doc = {"classes": self.class_names, "splits": self.splits, "meta": self.meta}
        return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode()

    def write(self, root=None) -> "DatasetManifest":
        root = Path(root or self.root)
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "labels").mkdir(parents=True, exist_ok=True)
        self.root = str(root)
        for image_id, img in self.images.items():
            write_ppm(self.image_path(image_id), img.pixels)
            write_yolo_labels(self.label_path(image_id), img.labels)
        (root / "manifest.json").write_bytes(self.manifest_bytes())
        return self

    @classmethod
    def open(cls, root) -> "DatasetManifest":
        root = Path(root)
        doc = json.loads((root / "manifest.json").read_text())
        return cls(str(root), doc["splits"], doc["classes"], meta=doc.get("meta", {}))


# ---------------------------------------------------------------------------
# synthetic data

PALETTE = [(220, 40, 40), (40, 90, 230), (240, 220, 40), (230, 60, 220), (40, 220, 220), (250, 140, 20)]
SHAPES = ("disk", "square", "triangle", "cross")


@dataclass
class SyntheticSpec:
    image_size: int = 64
    num_classes: int = 2
    objects_per_image: tuple = (1, 3)
    imbalance_ratio: float = 1.0
    size_range: tuple = (8, 16)
    n_train: int = 200
    n_val: int = 50
    seed: int = 0
    noise: float = 12.0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("SyntheticSpec needs at least one class")
        if self.imbalance_ratio < 1:
            raise ValueError("imbalance ratio must be >= 1")
        lo, hi = self.objects_per_image
        if not 0 <= lo <= hi:
            raise ValueError(f"bad objects_per_image {self.objects_per_image}")
        if self.size_range[1] > self.image_size:
            raise ValueError("objects larger than the image")
        self.objects_per_image = tuple(self.objects_per_image)
        self.size_range = tuple(self.size_range)

    def class_shares(self) -> np.ndarray:
        """Target share per class; class 0 is the majority, the last the rarest."""
        C = self.num_classes
        if C == 1:
            return np.ones(1)
        w = self.imbalance_ratio ** (-np.arange(C) / (C - 1))
        return w / w.sum()


def _draw_shape(canvas: np.ndarray, kind: str, x0: int, y0: int, s: int, color) -> None:
    yy, xx = np.mgrid[0:s, 0:s]
    c = (s - 1) / 2.0
    if kind == "disk":
        mask = (xx - c) ** 2 + (yy - c) ** 2 <= (s / 2.0) ** 2
    elif kind == "square":
        mask = np.ones((s, s), dtype=bool)
    elif kind == "triangle":
        mask = np.abs(xx - c) <= (yy + 1) / 2.0
    else:
        t = max(1, s // 3)
        lo = (s - t) // 2
        mask = np.zeros((s, s), dtype=bool)
        mask[lo:lo + t, :] = True
        mask[:, lo:lo + t] = True
    region = canvas[y0:y0 + s, x0:x0 + s]
    region[mask] = color


def _background(rng: RandomSource, size: int, noise: float) -> np.ndarray:
    base = np.array([60, 110, 50], dtype=np.float64) + rng.uniform(-20, 20, 3)
    coarse = rng.normal(size=(size // 8 + 1, size // 8 + 1, 3), scale=noise)
    smooth = np.kron(coarse, np.ones((8, 8, 1)))[:size, :size]
    fine = rng.normal(size=(size, size, 3), scale=noise / 2)
    return base + smooth + fine


def _place(rng: RandomSource, size: int, s: int, taken: list) -> tuple | None:
    for _ in range(50):
        x0 = int(rng.integers(0, size - s + 1))
        y0 = int(rng.integers(0, size - s + 1))
        box = (x0, y0, x0 + s, y0 + s)
        if all(box[2] + 1 <= t[0] or t[2] + 1 <= box[0] or box[3] + 1 <= t[1] or t[3] + 1 <= box[1] for t in taken):
            return box
    return None


def render_synthetic_image(rng: RandomSource, spec: SyntheticSpec, classes: list, image_id: str) -> AnnotatedImage:
    size = spec.image_size
    canvas = _background(rng, size, spec.noise)
    taken, labels = [], []
    for cls in classes:
        s = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
        box = _place(rng, size, s, taken)
        if box is None:
            continue
        taken.append(box)
        color = np.array(PALETTE[cls % len(PALETTE)], dtype=np.float64) + rng.uniform(-15, 15, 3)
        _draw_shape(canvas, SHAPES[cls % len(SHAPES)], box[0], box[1], s, color)
        labels.append(LabelRecord.from_xyxy(cls, box[0] / size, box[1] / size, box[2] / size, box[3] / size))
    pixels = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    return AnnotatedImage(pixels, labels, image_id)


def _split_images(spec: SyntheticSpec, rng: RandomSource, prefix: str, n: int) -> list:
    shares = spec.class_shares()
    counts = np.zeros(spec.num_classes)
    images = []
    lo, hi = spec.objects_per_image
    for k in range(n):
        n_obj = int(rng.integers(lo, hi + 1))
        classes = []
        for _ in range(n_obj):
            total = counts.sum() + 1
            cls = int(np.argmax(shares * total - counts))  # largest deficit, ties -> lower id
            counts[cls] += 1
            classes.append(cls)
        image_id = f"{prefix}_{k:04d}"
        images.append(render_synthetic_image(rng.derive(k + 1), spec, classes, image_id))
    return images


def generate_synthetic(spec: SyntheticSpec, root: str | os.PathLike | None = None) -> DatasetManifest:
    """Render a seeded shapes-on-texture dataset; written to ``root`` when given."""
    base = RandomSource(spec.seed)
    train = _split_images(spec, RandomSource(base.integers(0, 2**63)), "train", spec.n_train)
    val = _split_images(spec, RandomSource(base.integers(0, 2**63)), "val", spec.n_val)
    images = {img.image_id: img for img in train + val}
    meta = {"synthetic": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()}}
    manifest = DatasetManifest(
        str(root) if root is not None else "",
        {"train": [i.image_id for i in train], "val": [i.image_id for i in val]},
        [f"{SHAPES[c % len(SHAPES)]}_{c}" for c in range(spec.num_classes)],
        images,
        meta,
    )
    if root is not None:
        manifest.write(root)
    return manifest


def class_counts(images) -> dict:
    counts: dict = {}
    for img in images:
        for r in img.labels:
            counts[r.class_id] = counts.get(r.class_id, 0) + 1
    return dict(sorted(counts.items()))
