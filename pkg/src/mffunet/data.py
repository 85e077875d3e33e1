"""Slice ingestion, preprocessing, synthetic data and batching.

On disk a dataset is ``root/images/<case>_<idx>.png`` plus
``root/masks/<case>_<idx>.png``: 8-bit grayscale PNGs, where a mask pixel's
value is its class id.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

DEFAULT_MIN_FOREGROUND = 1e-3


class DatasetError(Exception):
    """Raised for unreadable, mismatched or malformed slice files."""


@dataclass
class RawSlice:
    image: np.ndarray  # H x W uint8
    mask: np.ndarray  # H x W uint8 class ids
    source: str = ""


@dataclass
class Sample:
    image: np.ndarray  # 1 x H x W float32 in [0, 1]
    mask: np.ndarray  # H x W int64
    source: str = ""


def read_gray(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P", "1"):
                raise DatasetError(f"{path}: expected 8-bit grayscale, got mode {im.mode}")
            return np.asarray(im.convert("L"), dtype=np.uint8).copy()
    except (OSError, ValueError) as e:
        raise DatasetError(f"cannot decode {path}: {e}") from None


def write_gray(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.ndim != 2 or arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise ValueError("expected a 2-D array with values in [0, 255]")
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path, format="PNG")


def load_slice_pair(image_path, mask_path, num_classes: int = 3) -> RawSlice:
    image = read_gray(image_path)
    mask = read_gray(mask_path)
    if image.shape != mask.shape:
        raise DatasetError(f"dimension mismatch: {image_path} is {image.shape}, {mask_path} is {mask.shape}")
    if mask.size and mask.max() >= num_classes:
        raise DatasetError(f"{mask_path}: label {mask.max()} >= {num_classes} classes")
    return RawSlice(image, mask, Path(image_path).stem)


def foreground_fraction(image: np.ndarray) -> float:
    return np.count_nonzero(image) / image.size


def filter_informative(slices: Sequence[RawSlice], min_foreground: float = DEFAULT_MIN_FOREGROUND) -> List[RawSlice]:
    """Drop black slices: keep those whose fraction of nonzero pixels is >= ``min_foreground``."""
    if not 0.0 <= min_foreground <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {min_foreground}")
    return [s for s in slices if foreground_fraction(s.image) >= min_foreground]


def resize_nearest(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize with ``out[i, j] = img[i * H // out_h, j * W // out_w]``."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target extents must be positive, got {out_h}x{out_w}")
    h, w = img.shape[-2:]
    rows = np.arange(out_h) * h // out_h
    cols = np.arange(out_w) * w // out_w
    return img[..., rows[:, None], cols[None, :]]


def normalize(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float32) / np.float32(255.0)


def quantize(img: np.ndarray) -> np.ndarray:
    """Inverse of :func:`normalize` for storage."""
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def preprocess_slice(raw: RawSlice, size: int) -> RawSlice:
    """Resize image and mask with the same index map (labels are never interpolated)."""
    return RawSlice(resize_nearest(raw.image, size, size), resize_nearest(raw.mask, size, size), raw.source)


def to_sample(raw: RawSlice) -> Sample:
    return Sample(normalize(raw.image)[None], raw.mask.astype(np.int64), raw.source)


def list_pairs(root) -> List[Tuple[Path, Path]]:
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise DatasetError(f"{root}: expected images/ and masks/ subdirectories")
    pairs = []
    for img in sorted(img_dir.glob("*.png")):
        mask = mask_dir / img.name
        if not mask.exists():
            raise DatasetError(f"no mask for {img}")
        pairs.append((img, mask))
    return pairs


def load_raw_dataset(root, num_classes: int = 3) -> List[RawSlice]:
    return [load_slice_pair(i, m, num_classes) for i, m in list_pairs(root)]


def load_dataset(root, num_classes: int = 3, size: Optional[int] = None) -> List[Sample]:
    """Load a dataset directory as training samples, resizing to ``size`` if given."""
    raws = load_raw_dataset(root, num_classes)
    if size is not None:
        raws = [preprocess_slice(r, size) if r.image.shape != (size, size) else r for r in raws]
    return [to_sample(r) for r in raws]


def write_dataset(root, slices: Sequence[RawSlice]) -> int:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in slices:
        write_gray(root / "images" / f"{s.source}.png", s.image)
        write_gray(root / "masks" / f"{s.source}.png", s.mask)
    return len(slices)


def _ellipse(size: int, cy: float, cx: float, ay: float, ax: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def synth_slice(rng: np.random.Generator, size: int, source: str) -> RawSlice:
    """Noisy background with a bright "kidney" ellipse holding a brighter "tumor" ellipse."""
    image = rng.integers(0, 41, size=(size, size))
    cy, cx = rng.uniform(0.4, 0.6, 2) * size
    ay, ax = rng.uniform(0.25, 0.4, 2) * size
    theta = rng.uniform(0, np.pi)
    kidney = _ellipse(size, cy, cx, ay, ax, theta)
    # integer tumour centre guarantees at least one tumour pixel
    ty = int(round(cy + rng.uniform(-0.3, 0.3) * ay))
    tx = int(round(cx + rng.uniform(-0.3, 0.3) * ax))
    scale = rng.uniform(0.4, 0.6)
    tumor = _ellipse(size, ty, tx, scale * ay, scale * ax, rng.uniform(0, np.pi)) & kidney
    tumor[ty, tx] = kidney[ty, tx]
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[kidney] = 1
    mask[tumor] = 2
    image[kidney] = rng.integers(130, 171, size=int(kidney.sum()))
    image[tumor] = rng.integers(215, 256, size=int(tumor.sum()))
    return RawSlice(image.astype(np.uint8), mask, source)


def synth_dataset(n: int, size: int, seed: int, out_dir=None) -> List[RawSlice]:
    """Generate ``n`` synthetic slices; also write them under ``out_dir`` if given."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if size < 16 or size & (size - 1):
        raise ValueError(f"size must be a power of two >= 16, got {size}")
    rng = np.random.default_rng(seed)
    slices = [synth_slice(rng, size, f"synth{i:04d}_000") for i in range(n)]
    if out_dir is not None:
        write_dataset(out_dir, slices)
    return slices


def batch_iter(samples: Sequence[Sample], batch_size: int,
               seed: Optional[int] = None) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images N x 1 x H x W, masks N x H x W)``; the final batch may be short."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(samples)) if seed is None else np.random.default_rng(seed).permutation(len(samples))
    for start in range(0, len(order), batch_size):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        yield (np.stack([s.image for s in chunk]).astype(np.float32),
               np.stack([s.mask for s in chunk]).astype(np.int64))
