"""Procedural scenes of coloured boxes with object- and part-level expressions.

Each scene holds two axis-aligned boxes on a grey background, one per image
half. Box corners sit on multiples of four pixels so that each half of a box
is still aligned to a 2-pixel grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import BenchmarkSplit, Granularity, ReferringSample, save_benchmark
from .masks import rle_encode

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (40, 70, 220),
    "yellow": (230, 210, 40),
}
BACKGROUND = (128, 128, 128)
PARTS = ("top half", "bottom half", "left half", "right half")


@dataclass(frozen=True)
class Box:
    color: str
    x0: int
    y0: int
    x1: int
    y1: int
    side: str  # "left" or "right" half of the image

    def mask(self, size: int) -> np.ndarray:
        m = np.zeros((size, size), dtype=np.uint8)
        m[self.y0:self.y1, self.x0:self.x1] = 1
        return m

    def part_mask(self, part: str, size: int) -> np.ndarray:
        m = np.zeros((size, size), dtype=np.uint8)
        xm, ym = (self.x0 + self.x1) // 2, (self.y0 + self.y1) // 2
        x0, y0, x1, y1 = self.x0, self.y0, self.x1, self.y1
        if part == "top half":
            y1 = ym
        elif part == "bottom half":
            y0 = ym
        elif part == "left half":
            x1 = xm
        elif part == "right half":
            x0 = xm
        else:
            raise ValueError(part)
        m[y0:y1, x0:x1] = 1
        return m

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        return self.x0, self.y0, self.x1, self.y1


@dataclass(frozen=True)
class Scene:
    size: int
    boxes: tuple[Box, Box]

    def render(self) -> np.ndarray:
        img = np.empty((self.size, self.size, 3), dtype=np.uint8)
        img[:] = BACKGROUND
        for b in self.boxes:
            img[b.y0:b.y1, b.x0:b.x1] = COLORS[b.color]
        return img


def _span(rng: np.random.Generator, lo: int, hi: int, min_len: int) -> tuple[int, int]:
    # multiples of 4 within [lo, hi], length >= min_len
    starts = np.arange(lo, hi - min_len + 1, 4)
    a = int(rng.choice(starts))
    ends = np.arange(a + min_len, hi + 1, 4)
    return a, int(rng.choice(ends))


def random_scene(rng: np.random.Generator, size: int = 32) -> Scene:
    colors = rng.choice(list(COLORS), size=2, replace=False)
    half = size // 2
    boxes = []
    for color, (lo, hi, side) in zip(colors, ((0, half, "left"), (half, size, "right"))):
        x0, x1 = _span(rng, lo, hi, 8)
        y0, y1 = _span(rng, 0, size, 8)
        boxes.append(Box(str(color), x0, y0, x1, y1, side))
    return Scene(size, tuple(boxes))


def object_expression(box: Box, long: bool) -> str:
    return f"the {box.color} box on the {box.side} side" if long else f"the {box.color} box"


def part_expression(box: Box, part: str) -> str:
    return f"{part} of {box.color} box"


def save_png(image: np.ndarray, path: Path) -> None:
    from PIL import Image

    Image.fromarray(image).save(path)


def write_fixture(root, *, seed: int = 7, size: int = 32, n_object_images: int = 6,
                  n_part_images: int = 4) -> BenchmarkSplit:
    """Write ``val.jsonl``, ``images/*.png`` and ``engine_images.jsonl`` under ``root``.

    Object images contribute one short (3-word) and one long (7-word)
    expression; part images contribute two 5-word part expressions, so the
    average expression length is exactly 5.0 words.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    samples, manifest = [], []
    for i in range(n_object_images + n_part_images):
        scene = random_scene(rng, size)
        ref = f"images/{i:04d}.png"
        save_png(scene.render(), root / ref)
        manifest.append({
            "image": ref, "width": size, "height": size,
            "objects": [{"bbox": list(b.bbox), "category": f"{b.color} box"} for b in scene.boxes],
        })
        for j, box in enumerate(scene.boxes):
            sid = f"{i:04d}_{j}"
            if i < n_object_images:
                samples.append(ReferringSample(
                    sid, ref, size, size, object_expression(box, long=bool(j)), rle_encode(box.mask(size)),
                    Granularity.OBJECT, f"{box.color} box"))
            else:
                part = PARTS[int(rng.integers(len(PARTS)))]
                samples.append(ReferringSample(
                    sid, ref, size, size, part_expression(box, part), rle_encode(box.part_mask(part, size)),
                    Granularity.PART, f"{box.color} box", part))
    split = BenchmarkSplit("val", samples, root)
    save_benchmark(split, root / "val.jsonl")
    with (root / "engine_images.jsonl").open("w", encoding="utf-8") as fh:
        for rec in manifest:
            fh.write(json.dumps(rec) + "\n")
    return split


def overfit_scenes(n_images: int = 4, seed: int = 0, size: int = 32):
    """``2 * n_images`` samples: one object and one part expression per scene.

    Returns ``(image, mask, expression, granularity)`` tuples.
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_images):
        scene = random_scene(rng, size)
        img = scene.render()
        a, b = scene.boxes[int(rng.integers(2))], scene.boxes[int(rng.integers(2))]
        part = PARTS[int(rng.integers(len(PARTS)))]
        out.append((img, a.mask(size), object_expression(a, long=False), Granularity.OBJECT))
        out.append((img, b.part_mask(part, size), part_expression(b, part), Granularity.PART))
    return out


def fixture_root() -> Path:
    """Directory of the bundled 20-sample fixture split."""
    return Path(__file__).parent / "fixtures"
