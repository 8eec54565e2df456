"""Image loading, resizing and class-directory datasets."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .tensor import DTYPE, Tensor

INPUT_SIZE = 224
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".pgm")
SUPPORTED_FORMATS = {"PNG", "JPEG", "PPM"}  # Pillow reports PGM files as PPM
LUMA = np.array([0.299, 0.587, 0.114])


class ImageLoadError(OSError):
    pass


class UnsupportedFormatError(ImageLoadError):
    pass


class DatasetError(ValueError):
    pass


def load_image(path) -> Tensor:
    """Read an image as a [1,H,W] grayscale tensor scaled to [0,1].

    Color images are converted with luma weights 0.299/0.587/0.114 in floating
    point, before any quantization.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format not in SUPPORTED_FORMATS:
                raise UnsupportedFormatError(f"{path}: unsupported image format {im.format}")
            im.load()
            if im.mode in ("L", "P", "1"):
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
            elif im.mode in ("I;16", "I;16B", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            else:
                rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
                arr = rgb @ LUMA
    except UnidentifiedImageError:
        raise UnsupportedFormatError(f"{path}: not a recognised image") from None
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        raise ImageLoadError(f"{path}: cannot read image ({exc.strerror})") from None
    return np.clip(arr, 0.0, 1.0).astype(DTYPE)[None]


def save_image(path, t: Tensor) -> None:
    """Write a [1,H,W] or [H,W] tensor in [0,1] as an 8-bit grayscale PNG."""
    arr = np.asarray(t).reshape(t.shape[-2:])
    Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


def _bilinear_axis(src: int, dst: int):
    # half-pixel centres: source coordinate of output i is (i + 0.5) * src / dst - 0.5
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0, src - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, pos - lo


def resize_bilinear(t: Tensor, height: int, width: int) -> Tensor:
    c, h, w = t.shape
    if h < 2 or w < 2:
        raise ValueError(f"cannot resize degenerate image of shape {list(t.shape)}")
    if (h, w) == (height, width):
        return t.copy()
    y0, y1, fy = _bilinear_axis(h, height)
    x0, x1, fx = _bilinear_axis(w, width)
    src = t.astype(np.float64)
    top = src[:, y0][:, :, x0] * (1 - fx) + src[:, y0][:, :, x1] * fx
    bot = src[:, y1][:, :, x0] * (1 - fx) + src[:, y1][:, :, x1] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    return out.astype(t.dtype)


def resize_to_input(t: Tensor, size: int = INPUT_SIZE) -> Tensor:
    return resize_bilinear(t, size, size)


@dataclass
class LabeledDataset:
    images: np.ndarray  # [N, 1, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    class_names: list[str]
    source_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.source_ids:
            self.source_ids = [str(i) for i in range(len(self.labels))]
        if self.images.ndim != 4 or not len(self.images) == len(self.labels) == len(self.source_ids):
            raise DatasetError("images, labels and source ids must align")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DatasetError(f"labels must lie in [0, {len(self.class_names)})")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DatasetError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], list(self.class_names),
                              [self.source_ids[i] for i in idx])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def groups(self) -> list[str]:
        """Subject/session identifier of each sample: the first path component of its source id."""
        return [sid.split("/")[0] for sid in self.source_ids]


def _image_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def load_class_directory_dataset(root, size: int = INPUT_SIZE) -> LabeledDataset:
    """One subdirectory per class; class index is the sorted rank of its name.

    Images are found recursively, ordered by path, and resized to ``size``.
    Source ids are paths relative to the class directory.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    class_dirs = sorted((d for d in root.iterdir() if d.is_dir()), key=lambda d: d.name)
    if not class_dirs:
        raise DatasetError(f"{root}: no class subdirectories found")
    images, labels, ids = [], [], []
    for label, cdir in enumerate(class_dirs):
        files = _image_files(cdir)
        if not files:
            raise DatasetError(f"class directory {cdir} contains no images")
        for f in files:
            img = load_image(f)
            if img.shape[1:] != (size, size):
                img = resize_to_input(img, size)
            images.append(img)
            labels.append(label)
            ids.append(f.relative_to(cdir).as_posix())
    return LabeledDataset(np.stack(images), np.array(labels), [d.name for d in class_dirs], ids)


def write_class_directory_dataset(ds: LabeledDataset, root) -> None:
    root = Path(root)
    for i, (img, label) in enumerate(zip(ds.images, ds.labels)):
        cdir = root / ds.class_names[label]
        cdir.mkdir(parents=True, exist_ok=True)
        save_image(cdir / f"{i:05d}.png", img)
