"""Generated stand-in datasets: cartoon expression faces and a separable toy set."""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

from .data import LabeledDataset

EMOTIONS = ["anger", "contempt", "disgust", "fear", "happiness", "sadness", "surprise"]


def _line(draw, pts, width):
    draw.line([tuple(map(float, p)) for p in pts], fill=0, width=width, joint="curve")


def _arc_points(cx, cy, half_width, bend, n=16):
    # parabola through the mouth corners; bend > 0 curves the middle downwards (smile in image coords)
    t = np.linspace(-1, 1, n)
    return np.stack([cx + half_width * t, cy + bend * (1 - t ** 2)], axis=1)


def _draw_face(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    s = size / 224.0
    scale = rng.uniform(0.9, 1.1) * s
    cx = size / 2 + rng.uniform(-10, 10) * s
    cy = size / 2 + rng.uniform(-10, 10) * s
    bg = rng.uniform(0.25, 0.45)
    face = rng.uniform(0.75, 0.9)
    im = Image.new("L", (size, size), int(bg * 255))
    d = ImageDraw.Draw(im)
    rx, ry = 70 * scale, 90 * scale
    d.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=int(face * 255))
    w = max(1, int(round(7 * scale)))
    ex, ey, er = 28 * scale, -25 * scale, 8 * scale
    for sx in (-1, 1):
        d.ellipse([cx + sx * ex - er, cy + ey - er, cx + sx * ex + er, cy + ey + er], fill=0)

    brow_y = cy - 48 * scale
    mouth_y = cy + 45 * scale
    mw = 32 * scale
    name = EMOTIONS[label]
    if name == "anger":
        for sx in (-1, 1):  # brows slanting down towards the nose
            _line(d, [(cx + sx * 48 * scale, brow_y - 10 * scale), (cx + sx * 12 * scale, brow_y + 10 * scale)], w)
        _line(d, [(cx - mw, mouth_y), (cx + mw, mouth_y)], w)
    elif name == "contempt":
        # one-sided smirk
        _line(d, [(cx - mw, mouth_y), (cx + 0.2 * mw, mouth_y), (cx + mw, mouth_y - 18 * scale)], w)
    elif name == "disgust":
        for k in (-1, 1):  # nose wrinkles
            _line(d, [(cx + k * 10 * scale, cy - 5 * scale), (cx + k * 22 * scale, cy + 12 * scale)], w)
        zig = [(cx - mw + i * mw / 3, mouth_y + (8 if i % 2 else -8) * scale) for i in range(7)]
        _line(d, zig, w)
    elif name == "fear":
        for sx in (-1, 1):  # brows raised towards the middle
            _line(d, [(cx + sx * 48 * scale, brow_y + 4 * scale), (cx + sx * 12 * scale, brow_y - 14 * scale)], w)
        d.rectangle([cx - mw, mouth_y - 6 * scale, cx + mw, mouth_y + 6 * scale], fill=0)
    elif name == "happiness":
        _line(d, _arc_points(cx, mouth_y - 8 * scale, mw, 22 * scale), w)
    elif name == "sadness":
        _line(d, _arc_points(cx, mouth_y + 12 * scale, mw, -22 * scale), w)
    else:  # surprise
        for sx in (-1, 1):
            _line(d, _arc_points(cx + sx * 30 * scale, brow_y - 8 * scale, 18 * scale, -10 * scale, 8), w)
        r = 16 * scale
        d.ellipse([cx - r, mouth_y - r, cx + r, mouth_y + r], outline=0, width=w)
    return np.asarray(im, dtype=np.float64) / 255.0


def make_expression_dataset(n_per_class: int = 100, size: int = 224, seed: int = 0,
                            noise: float = 0.08) -> LabeledDataset:
    """Seven classes of cartoon faces, one per emotion, with jitter and Gaussian pixel noise."""
    rng = np.random.default_rng(seed)
    images, labels, ids = [], [], []
    for label in range(len(EMOTIONS)):
        for i in range(n_per_class):
            img = _draw_face(label, size, rng) + rng.normal(0, noise, (size, size))
            images.append(np.clip(img, 0, 1)[None])
            labels.append(label)
            ids.append(f"{EMOTIONS[label]}_{i:04d}")
    return LabeledDataset(np.stack(images), np.array(labels), list(EMOTIONS), ids)


def make_toy_dataset(n: int = 8, size: int = 16, seed: int = 0, noise: float = 0.05) -> LabeledDataset:
    """Two linearly separable classes: bright left half versus bright right half."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    half = size // 2
    for i in range(n):
        label = i % 2
        img = np.full((size, size), 0.2)
        if label == 0:
            img[:, :half] = 0.8
        else:
            img[:, half:] = 0.8
        img += rng.normal(0, noise, img.shape)
        images.append(np.clip(img, 0, 1)[None])
        labels.append(label)
    return LabeledDataset(np.stack(images), np.array(labels), ["left", "right"])
