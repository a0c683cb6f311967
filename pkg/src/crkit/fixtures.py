"""Deterministic synthetic inputs: feature tensors, crack images, box sets."""
from __future__ import annotations

import numpy as np

from .metrics import BBox, Detection, GroundTruthBox
from .rng import RngState, generator, uniform

CRACK_BACKGROUND = 0.1
CRACK_FOREGROUND = 0.9
_STEPS = [(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)]


def random_tensor(rng: RngState, shape) -> np.ndarray:
    """Uniform [-1, 1] float32 tensor."""
    return uniform(rng, tuple(shape)).astype(np.float32)


def crack_image(rng: RngState, h: int, w: int, fraction: float = 0.05) -> np.ndarray:
    """Dark ``(1, 1, h, w)`` image with bright 1-pixel polylines.

    Polylines are 8-connected random walks with a preferred heading; drawing
    stops once exactly ``round(fraction * h * w)`` pixels are lit.
    """
    if not 0 <= fraction <= 1:
        raise ValueError(f"crack fraction must be in [0, 1], got {fraction}")
    gen = generator(rng)
    target = int(round(fraction * h * w))
    lit = np.zeros((h, w), dtype=bool)
    count = 0
    while count < target:
        y, x = int(gen.integers(h)), int(gen.integers(w))
        heading = int(gen.integers(8))
        for _ in range(int(gen.integers(max(h, w) // 2, 2 * max(h, w) + 1))):
            if not lit[y, x]:
                lit[y, x] = True
                count += 1
                if count == target:
                    break
            heading = (heading + int(gen.choice([-1, 0, 0, 0, 1]))) % 8
            dy, dx = _STEPS[heading]
            y, x = y + dy, x + dx
            if not (0 <= y < h and 0 <= x < w):
                break
    img = np.where(lit, CRACK_FOREGROUND, CRACK_BACKGROUND).astype(np.float32)
    return img[None, None]


def bright_fraction(image: np.ndarray) -> float:
    return float(np.mean(np.asarray(image) > 0.5 * (CRACK_BACKGROUND + CRACK_FOREGROUND)))


def _random_box(gen, canvas: float, side_lo: float, side_hi: float) -> BBox:
    bw = float(gen.uniform(side_lo, side_hi))
    bh = float(gen.uniform(side_lo, side_hi))
    x1 = float(gen.uniform(0, canvas - bw))
    y1 = float(gen.uniform(0, canvas - bh))
    return BBox(round(x1, 1), round(y1, 1), round(x1 + bw, 1), round(y1 + bh, 1))


def box_fixture(rng: RngState, n_images: int = 3, max_gt: int = 4, max_det: int = 8,
                n_classes: int = 2, canvas: float = 320.0):
    """Ground truths plus jittered/false-positive detections across all size buckets.

    Returns ``(detections, ground_truths)``. Scores are rounded to two decimals
    so equal-score ties occur.
    """
    gen = generator(rng)
    dets, gts = [], []
    for i in range(n_images):
        image_id = f"img{i}"
        n_gt = int(gen.integers(0, max_gt + 1))
        image_gts = []
        for _ in range(n_gt):
            side = [(8, 30), (30, 100), (90, 160)][int(gen.integers(3))]
            image_gts.append(GroundTruthBox(image_id, f"c{int(gen.integers(n_classes))}",
                                            _random_box(gen, canvas, *side)))
        gts.extend(image_gts)
        n_det = int(gen.integers(0, max_det + 1))
        for _ in range(n_det):
            if image_gts and gen.random() < 0.7:
                g = image_gts[int(gen.integers(len(image_gts)))]
                b = g.box
                jw = 0.15 * (b.x2 - b.x1)
                jh = 0.15 * (b.y2 - b.y1)
                dx1, dy1, dx2, dy2 = gen.uniform(-1, 1, size=4)
                x1, x2 = sorted((b.x1 + dx1 * jw, b.x2 + dx2 * jw))
                y1, y2 = sorted((b.y1 + dy1 * jh, b.y2 + dy2 * jh))
                box = BBox(round(x1, 1), round(y1, 1), round(x2, 1), round(y2, 1))
                cls = g.class_id if gen.random() < 0.9 else f"c{int(gen.integers(n_classes))}"
            else:
                side = [(8, 30), (30, 100), (90, 160)][int(gen.integers(3))]
                box = _random_box(gen, canvas, *side)
                cls = f"c{int(gen.integers(n_classes))}"
            dets.append(Detection(image_id, cls, box, round(float(gen.uniform(0.05, 1.0)), 2)))
    return dets, gts
