"""Mask geometry and metric kernels.

Binary masks are 2-D numpy arrays of shape ``(height, width)`` holding 0/1
values. Probability masks are float arrays of the same layout with entries in
``[0, 1]``. Run-length masks (:class:`RleMask`) are the wire form: row-major,
alternating runs, the first run counting background pixels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateUnion, EmptyEvaluation, InvalidRle, ShapeMismatch, SumMismatch

DEFAULT_THRESHOLD = 0.35


@dataclass(frozen=True)
class RleMask:
    width: int
    height: int
    counts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))

    def to_json(self) -> dict:
        return {"w": self.width, "h": self.height, "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: dict) -> "RleMask":
        try:
            return cls(width=int(obj["w"]), height=int(obj["h"]), counts=tuple(obj["counts"]))
        except (KeyError, TypeError) as exc:
            raise InvalidRle(f"malformed RLE object: {exc}") from exc

    def area(self) -> int:
        return sum(self.counts[1::2])


@dataclass(frozen=True)
class IoUStats:
    intersection: int
    union: int

    @property
    def iou(self) -> float:
        # both masks empty: perfect agreement
        if self.union == 0:
            return 1.0
        return self.intersection / self.union


def as_binary(mask) -> np.ndarray:
    """Validate and return ``mask`` as a 2-D uint8 array of zeros and ones."""
    arr = np.asarray(mask)
    if arr.ndim != 2 or arr.shape[0] <= 0 or arr.shape[1] <= 0:
        raise ShapeMismatch(f"binary mask must be a non-empty 2-D grid, got shape {arr.shape}")
    if arr.dtype == bool:
        return arr.astype(np.uint8)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("binary mask entries must be 0 or 1")
    return arr.astype(np.uint8)


def rle_encode(mask) -> RleMask:
    m = as_binary(mask)
    height, width = m.shape
    flat = m.reshape(-1)
    # indices where the value changes
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs.insert(0, 0)
    return RleMask(width=width, height=height, counts=tuple(runs))


def rle_decode(rle: RleMask) -> np.ndarray:
    if rle.width <= 0 or rle.height <= 0:
        raise InvalidRle(f"non-positive mask size {rle.width}x{rle.height}")
    counts = rle.counts
    if any(c < 0 for c in counts):
        raise InvalidRle("negative run length")
    if any(c == 0 for c in counts[1:]):
        raise InvalidRle("zero-length interior run")
    total = sum(counts)
    if total != rle.width * rle.height:
        raise SumMismatch(f"counts sum to {total}, expected {rle.width}x{rle.height}={rle.width * rle.height}")
    values = np.arange(len(counts)) % 2
    flat = np.repeat(values.astype(np.uint8), counts)
    return flat.reshape(rle.height, rle.width)


def rle_dumps(rle: RleMask) -> str:
    return json.dumps(rle.to_json())


def rle_loads(text: str) -> RleMask:
    return RleMask.from_json(json.loads(text))


def read_mask_png(path) -> np.ndarray:
    """Read a single-channel PNG; any nonzero pixel is foreground."""
    from PIL import Image

    with Image.open(Path(path)) as img:
        arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr.max(axis=2)
    return (arr != 0).astype(np.uint8)


def write_mask_png(mask, path) -> None:
    from PIL import Image

    Image.fromarray(as_binary(mask) * 255, mode="L").save(Path(path))


def iou_stats(pred, gt) -> IoUStats:
    p = as_binary(pred).astype(bool)
    g = as_binary(gt).astype(bool)
    if p.shape != g.shape:
        raise ShapeMismatch(f"prediction {p.shape[::-1]} vs ground truth {g.shape[::-1]} (w, h)")
    return IoUStats(int(np.count_nonzero(p & g)), int(np.count_nonzero(p | g)))


def iou(pred, gt) -> float:
    return iou_stats(pred, gt).iou


def miou(samples: Sequence[IoUStats]) -> float:
    """Mean of per-sample IoUs.

    Per-sample ratios are summed with :func:`math.fsum`, which is exact before
    the final rounding, so the result does not depend on sample order.
    """
    samples = list(samples)
    if not samples:
        raise EmptyEvaluation("mIoU over an empty sample list")
    return math.fsum(s.iou for s in samples) / len(samples)


def oiou(samples: Sequence[IoUStats]) -> float:
    samples = list(samples)
    if not samples:
        raise EmptyEvaluation("oIoU over an empty sample list")
    inter = sum(s.intersection for s in samples)
    union = sum(s.union for s in samples)
    if union == 0:
        raise DegenerateUnion("total union is zero")
    return inter / union


def binarize(prob, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Pixel is foreground iff its confidence is strictly greater than ``threshold``."""
    return (np.asarray(prob) > threshold).astype(np.uint8)


def _bilinear_axis(src: int, dst: int):
    # half-pixel centres, edge-clamped sampling
    scale = src / dst
    pos = (np.arange(dst) + 0.5) * scale - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    return lo, hi, frac


def resize_prob(prob, target_w: int, target_h: int) -> np.ndarray:
    """Bilinear resize of a probability map to ``(target_h, target_w)``."""
    if target_w <= 0 or target_h <= 0:
        raise ValueError("target size must be positive")
    p = np.asarray(prob, dtype=np.float64)
    if p.ndim != 2:
        raise ShapeMismatch(f"probability map must be 2-D, got shape {p.shape}")
    h, w = p.shape
    if (h, w) == (target_h, target_w):
        return p.copy()
    y0, y1, fy = _bilinear_axis(h, target_h)
    x0, x1, fx = _bilinear_axis(w, target_w)
    fy = fy[:, None]
    top = p[y0][:, x0] * (1 - fx) + p[y0][:, x1] * fx
    bottom = p[y1][:, x0] * (1 - fx) + p[y1][:, x1] * fx
    out = top * (1 - fy) + bottom * fy
    return np.clip(out, 0.0, 1.0)


def resize_mask_nearest(mask, target_w: int, target_h: int) -> np.ndarray:
    m = as_binary(mask)
    h, w = m.shape
    ys = np.minimum(((np.arange(target_h) + 0.5) * h / target_h).astype(int), h - 1)
    xs = np.minimum(((np.arange(target_w) + 0.5) * w / target_w).astype(int), w - 1)
    return m[ys][:, xs]


def majority_pool(mask, grid_w: int, grid_h: int) -> np.ndarray:
    """Downsample a binary mask to a ``grid_h x grid_w`` grid by block majority.

    The mask is first brought to an exact multiple of the grid with
    nearest-neighbour resizing. A cell is foreground when at least half of its
    pixels are.
    """
    m = as_binary(mask)
    h, w = m.shape
    if h % grid_h or w % grid_w:
        m = resize_mask_nearest(m, grid_w * max(1, -(-w // grid_w)), grid_h * max(1, -(-h // grid_h)))
        h, w = m.shape
    blocks = m.reshape(grid_h, h // grid_h, grid_w, w // grid_w).mean(axis=(1, 3))
    return (blocks >= 0.5).astype(np.uint8)

