"""Toy scenes for offline runs: rectangular "buildings" on textured ground."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from . import data
from .pseudochange import SegSample

ROOF_COLORS = np.array([[0.85, 0.35, 0.30], [0.80, 0.80, 0.82], [0.90, 0.60, 0.25]], dtype=np.float32)


def background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.15, 0.45, size=3).astype(np.float32)
    coarse = rng.normal(0.0, 0.06, size=(size // 8, size // 8, 3)).astype(np.float32)
    field = np.kron(coarse, np.ones((8, 8, 1), dtype=np.float32))
    fine = rng.normal(0.0, 0.03, size=(size, size, 3)).astype(np.float32)
    return np.clip(base + field + fine, 0.0, 1.0)


def place_buildings(rng: np.random.Generator, size: int, count: int, grid: int = 4,
                    min_side: int = 12, max_side: int = 24, taken: np.ndarray | None = None):
    """Non-overlapping grid-aligned rectangles; returns (mask, list of boxes)."""
    mask = np.zeros((size, size), dtype=np.uint8)
    occupied = np.zeros_like(mask) if taken is None else taken.copy()
    boxes = []
    for _ in range(count * 20):
        if len(boxes) == count:
            break
        h = int(rng.integers(min_side // grid, max_side // grid + 1)) * grid
        w = int(rng.integers(min_side // grid, max_side // grid + 1)) * grid
        y = int(rng.integers(0, (size - h) // grid + 1)) * grid
        x = int(rng.integers(0, (size - w) // grid + 1)) * grid
        # one grid cell of clearance around every building
        y0, x0 = max(y - grid, 0), max(x - grid, 0)
        if occupied[y0:y + h + grid, x0:x + w + grid].any():
            continue
        occupied[y:y + h, x:x + w] = 1
        mask[y:y + h, x:x + w] = 1
        boxes.append((y, x, h, w))
    return mask, boxes


def paint(img: np.ndarray, boxes, rng: np.random.Generator) -> np.ndarray:
    out = img.copy()
    for y, x, h, w in boxes:
        color = ROOF_COLORS[rng.integers(len(ROOF_COLORS))] + rng.normal(0, 0.03, 3).astype(np.float32)
        out[y:y + h, x:x + w] = np.clip(color, 0, 1)
        out[y:y + h, x + w - 2:x + w] *= 0.7  # shadow edge
    return out


def segmentation_set(n: int, size: int = 64, seed: int = 0, buildings: tuple[int, int] = (1, 4)) -> list[SegSample]:
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        mask, boxes = place_buildings(rng, size, int(rng.integers(buildings[0], buildings[1] + 1)))
        samples.append(SegSample(paint(background(rng, size), boxes, rng), mask.astype(np.int64)))
    return samples


def change_pairs(n: int, size: int = 64, seed: int = 0) -> list[data.ChangePair]:
    """Pairs sharing ground and some buildings; others appear or disappear."""
    rng = np.random.default_rng(seed)
    pairs = []
    for k in range(n):
        ground = background(rng, size)
        kept_mask, kept = place_buildings(rng, size, int(rng.integers(0, 3)))
        gone_mask, gone = place_buildings(rng, size, int(rng.integers(0, 3)), taken=kept_mask)
        new_mask, new = place_buildings(rng, size, int(rng.integers(1, 3)), taken=kept_mask | gone_mask)
        a = paint(ground, kept + gone, rng)
        shift = rng.normal(0.0, 0.04, 3).astype(np.float32)
        b = paint(np.clip(ground * rng.uniform(0.9, 1.1) + shift, 0, 1), kept + new, rng)
        label = (gone_mask | new_mask).astype(np.uint8)
        pairs.append(data.ChangePair(f"{k:04d}", a, b, label))
    return pairs


def write_change_dataset(root: str | Path, pairs) -> Path:
    root = Path(root)
    for p in pairs:
        data.write_rgb(root / "A" / f"{p.name}.png", p.image_a)
        data.write_rgb(root / "B" / f"{p.name}.png", p.image_b)
        data.write_binary(root / "label" / f"{p.name}.png", p.label)
    return root


def write_segmentation_source(root: str | Path, samples, prefix: str = "") -> Path:
    root = Path(root)
    for k, s in enumerate(samples):
        data.write_rgb(root / "images" / f"{prefix}{k:04d}.png", s.image)
        data.write_binary(root / "masks" / f"{prefix}{k:04d}.png", s.mask)
    return root
