"""Representative-frame extraction from pre-decoded video frame sequences.

Frames are smoothed with a Gaussian, consecutive frames are differenced, and a
maximum filter of shrinking width picks out the frames where the largest
isolated changes happen. Changes clustered in time survive the wide filters as
a single frame; the narrower filters then fill in the remaining slots.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import IMAGE_SUFFIXES, INPUT_SIZE, load_image, resize_to_input
from .tensor import Tensor

DEFAULT_COUNT = 20
DEFAULT_DISCARD = 2
DEFAULT_SIGMA = 1.0


class TooFewFramesError(ValueError):
    pass


class FrameSizeMismatchError(ValueError):
    pass


@dataclass
class FrameSequence:
    frames: list[Tensor]  # each [1, H, W]
    session: str = ""
    frame_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.frame_ids:
            self.frame_ids = [str(i) for i in range(len(self.frames))]
        shapes = {f.shape for f in self.frames}
        if len(shapes) > 1:
            raise FrameSizeMismatchError(f"session {self.session!r}: frames differ in size {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.frames)


def _natural_key(path: Path):
    return [int(tok) if tok.isdigit() else tok for tok in re.split(r"(\d+)", path.name)]


def load_frame_sequence(directory, session: str | None = None) -> FrameSequence:
    """Load every image in ``directory`` ordered by the numbers in their file names."""
    directory = Path(directory)
    files = sorted((p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES), key=_natural_key)
    return FrameSequence([load_image(f) for f in files], session or directory.name, [f.name for f in files])


def gaussian_kernel(sigma: float) -> np.ndarray:
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(frame: Tensor, sigma: float = DEFAULT_SIGMA) -> Tensor:
    """Separable Gaussian blur with radius ceil(3*sigma) and reflected borders."""
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    img = np.asarray(frame, dtype=np.float64)
    lead = img.shape[:-2]
    img = img.reshape(-1, *img.shape[-2:])
    pad = np.pad(img, ((0, 0), (r, r), (r, r)), mode="reflect")
    h, w = img.shape[-2:]
    rows = sum(k[i] * pad[:, i:i + h, :] for i in range(len(k)))
    out = sum(k[j] * rows[:, :, j:j + w] for j in range(len(k)))
    return out.reshape(*lead, h, w).astype(frame.dtype)


def frame_differences(seq: FrameSequence | list, sigma: float = DEFAULT_SIGMA,
                      metric: str = "mean_abs") -> np.ndarray:
    """Difference score of each frame to its predecessor.

    Entry ``i`` scores frame ``i + 1`` against frame ``i``, so the result has
    one entry fewer than there are frames. ``metric`` is ``mean_abs`` or
    ``mean_sq``.
    """
    frames = seq.frames if isinstance(seq, FrameSequence) else list(seq)
    if len(frames) < 2:
        raise TooFewFramesError("need at least two frames to take differences")
    if len({f.shape for f in frames}) > 1:
        raise FrameSizeMismatchError("all frames must share one size")
    smooth = [gaussian_smooth(np.asarray(f, dtype=np.float64), sigma) for f in frames]
    diffs = []
    for prev, cur in zip(smooth, smooth[1:]):
        delta = cur - prev
        if metric == "mean_abs":
            diffs.append(np.abs(delta).mean())
        elif metric == "mean_sq":
            diffs.append((delta * delta).mean())
        else:
            raise ValueError(f"unknown difference metric {metric!r}")
    return np.array(diffs)


def window_schedule(n_frames: int) -> list[int]:
    """Filter widths: start at the frame count, halve down to 3, finish with 1."""
    sizes = []
    w = n_frames
    while w > 3:
        sizes.append(w)
        w //= 2
    return sizes + [3, 1]


def windowed_maxima(scores: np.ndarray, width: int) -> np.ndarray:
    """Positions that are the maximum of the window of half-width ``width // 2`` centred on them.

    Windows are clipped at the ends; among equal values the lowest position wins.
    """
    half = width // 2
    padded = np.pad(np.asarray(scores, dtype=np.float64), half, constant_values=-np.inf)
    win = sliding_window_view(padded, 2 * half + 1)
    return np.flatnonzero(win.argmax(axis=1) == half)


def select_from_scores(scores, count: int = DEFAULT_COUNT) -> list[int]:
    """Frame indices (ascending) of the ``count`` most representative changes.

    ``scores[i]`` belongs to frame ``i + 1``. Candidates accumulate from the
    widest filter to the narrowest; when a round overshoots, its candidates
    with the largest scores are kept.
    """
    d = np.asarray(scores, dtype=np.float64)
    if count < 1:
        raise ValueError("count must be >= 1")
    if len(d) < count:
        raise TooFewFramesError(f"{len(d)} difference scores cannot yield {count} frames")
    chosen: list[int] = []
    seen: set[int] = set()
    for width in window_schedule(len(d) + 1):
        fresh = [int(t) for t in windowed_maxima(d, width) if t not in seen]
        if len(chosen) + len(fresh) >= count:
            fresh.sort(key=lambda t: (-d[t], t))
            chosen += fresh[: count - len(chosen)]
            break
        chosen += fresh
        seen.update(fresh)
    return sorted(t + 1 for t in chosen)


def select_representative_frames(seq: FrameSequence, count: int = DEFAULT_COUNT,
                                 sigma: float = DEFAULT_SIGMA, metric: str = "mean_abs") -> list[int]:
    if len(seq) < 3:
        raise TooFewFramesError("need at least three frames")
    return select_from_scores(frame_differences(seq, sigma, metric), count)


@dataclass
class Extraction:
    session: str
    selected: list[int]
    discarded: list[int]
    kept: list[int]
    images: list[Tensor]


def extract_mmi_style(seq: FrameSequence, count: int = DEFAULT_COUNT, discard: int = DEFAULT_DISCARD,
                      sigma: float = DEFAULT_SIGMA, size: int = INPUT_SIZE,
                      metric: str = "mean_abs") -> Extraction:
    """Select ``count`` frames, drop the ``discard`` earliest (usually neutral), resize the rest.

    The returned images are the original, unsmoothed frames.
    """
    selected = select_representative_frames(seq, count, sigma, metric)
    discarded, kept = selected[:discard], selected[discard:]
    images = [resize_to_input(seq.frames[i], size) for i in kept]
    return Extraction(seq.session, selected, discarded, kept, images)


def write_manifest(path, extractions: list[Extraction], sigma: float, count: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["session", "selected", "discarded", "sigma", "count"])
        for ex in extractions:
            w.writerow([ex.session, " ".join(map(str, ex.selected)), " ".join(map(str, ex.discarded)),
                        repr(float(sigma)), count])
