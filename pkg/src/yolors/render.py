"""Box overlays written as P6 pixmaps."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import encode_ppm

TRUTH_COLOR = (0, 255, 0)
PRED_COLOR = (255, 0, 255)


def outline_mask(h: int, w: int, box) -> np.ndarray:
    """One-pixel outline of ``box`` (pixel coords, x2/y2 exclusive) clipped to the image."""
    x1, y1, x2, y2 = box
    c0, r0 = int(np.floor(x1)), int(np.floor(y1))
    c1, r1 = int(np.ceil(x2)) - 1, int(np.ceil(y2)) - 1
    m = np.zeros((h, w), dtype=bool)
    if c1 < c0 or r1 < r0:
        return m
    cs, ce = max(c0, 0), min(c1, w - 1)
    rs, re = max(r0, 0), min(r1, h - 1)
    if cs > ce or rs > re:
        return m
    for r in (r0, r1):
        if 0 <= r < h:
            m[r, cs:ce + 1] = True
    for c in (c0, c1):
        if 0 <= c < w:
            m[rs:re + 1, c] = True
    return m


def draw(pixels: np.ndarray, truths=(), dets=()) -> np.ndarray:
    """Copy of ``pixels`` with truths drawn first, predictions over them."""
    out = np.array(pixels, dtype=np.uint8, copy=True)
    if out.ndim != 3 or out.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got {out.shape}")
    h, w = out.shape[:2]
    for boxes, color in ((truths, TRUTH_COLOR), (dets, PRED_COLOR)):
        for b in boxes:
            box = getattr(b, "box", b)
            out[outline_mask(h, w, box)] = color
    return out


def render_detections(img, truths, dets, out_path) -> Path:
    """Write the overlay; ``img`` is an AnnotatedImage or an H x W x 3 array."""
    pixels = getattr(img, "pixels", img)
    blob = encode_ppm(draw(pixels, truths, dets))
    p = Path(out_path)
    try:
        p.write_bytes(blob)
    except OSError as e:
        raise OSError(f"cannot write {p}: {e.strerror}") from None
    return p
