"""Pseudo-change pairs built from single-temporal segmentation data.

Two unrelated samples of one segmentation source play the roles of the
pre- and post-change images; the change label is the XOR of their masks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
import yaml
from PIL import Image
from scipy import ndimage

from . import data
from .errors import CapacityError, ConfigError, DataError, DomainError, StructuralError


@dataclass
class SegSample:
    image: np.ndarray  # HxWx3 float32 in [0, 1]
    mask: np.ndarray   # HxW integer class ids

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise StructuralError(f"image size {self.image.shape[:2]} != mask size {self.mask.shape}")


@dataclass
class PseudoChangeSample:
    image_a: np.ndarray
    image_b: np.ndarray
    seg_a: np.ndarray
    seg_b: np.ndarray
    label: np.ndarray
    source: str = ""
    indices: tuple[int, int] = (-1, -1)


@dataclass
class SourceSpec:
    name: str
    path: str = ""
    proportion: float = 1.0
    # for multi-class masks: the single class kept as foreground
    keep_class: int | None = None
    num_classes: int | None = None


@dataclass
class DatasetManifest:
    sources: list[SourceSpec]
    tile_size: int = 512
    samples_per_epoch: int = 9000
    seed: int = 0

    def __post_init__(self):
        self.sources = [s if isinstance(s, SourceSpec) else SourceSpec(**s) for s in self.sources]
        if not self.sources:
            raise ConfigError("manifest needs at least one source")
        total = sum(s.proportion for s in self.sources)
        if abs(total - 1.0) > 1e-6:
            raise ConfigError(f"source proportions must sum to 1, got {total}")
        if any(s.proportion < 0 for s in self.sources):
            raise ConfigError("source proportions must be non-negative")
        if self.tile_size % 32:
            raise ConfigError(f"tile size {self.tile_size} is not a multiple of 32")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "tile_size": self.tile_size,
            "samples_per_epoch": self.samples_per_epoch,
            "sources": [dict(name=s.name, path=s.path, proportion=s.proportion,
                             keep_class=s.keep_class, num_classes=s.num_classes)
                        for s in self.sources],
        }


def xor_label(y: np.ndarray, y2: np.ndarray) -> np.ndarray:
    y, y2 = np.asarray(y), np.asarray(y2)
    if y.shape != y2.shape:
        raise StructuralError(f"mask shapes differ: {y.shape} vs {y2.shape}")
    for m in (y, y2):
        if m.size and not ((m == 0) | (m == 1)).all():
            raise DomainError("masks must be binary (values 0/1)")
    return np.bitwise_xor(y.astype(np.uint8), y2.astype(np.uint8))


def filter_category(mask: np.ndarray, keep_class: int, num_classes: int | None = None) -> np.ndarray:
    """Binary mask of the pixels labelled ``keep_class``."""
    mask = np.asarray(mask)
    if keep_class < 0 or (num_classes is not None and keep_class >= num_classes):
        raise DomainError(f"class id {keep_class} outside 0..{(num_classes or 0) - 1}")
    return (mask == keep_class).astype(np.uint8)


def binarize_mask(mask: np.ndarray, spec: SourceSpec) -> np.ndarray:
    if spec.keep_class is not None:
        return filter_category(mask, spec.keep_class, spec.num_classes)
    values = np.unique(mask)
    if not np.isin(values, (0, 1, 255)).all():
        raise DomainError(f"source '{spec.name}': mask has values {values[:8].tolist()}; "
                          "set keep_class for multi-class masks")
    return (mask > 0).astype(np.uint8)


def tile(sample: SegSample, size: int) -> list[SegSample]:
    """Non-overlapping ``size x size`` tiles, zero-padded at the right/bottom edges."""
    if size <= 0 or size % 32:
        raise ConfigError(f"tile size {size} is not a positive multiple of 32")
    h, w = sample.mask.shape
    return [SegSample(data.crop(sample.image, y, x, size), data.crop(sample.mask, y, x, size))
            for y, x in data.tile_grid(h, w, size)]


class SegSource:
    """Tiled view over one segmentation dataset (in memory or on disk)."""

    def __init__(self, spec: SourceSpec, tiles: Sequence[SegSample] | None = None,
                 tile_size: int | None = None):
        self.spec = spec
        self.name = spec.name
        self.tile_size = tile_size
        self._tiles = list(tiles) if tiles is not None else None
        self._index: list[tuple[Path, Path, int, int]] = []
        if tiles is None:
            self._scan(Path(spec.path))
            self._load = lru_cache(maxsize=4)(self._load_full)

    @classmethod
    def from_samples(cls, spec: SourceSpec, samples: Sequence[SegSample], tile_size: int | None = None):
        tiles = []
        for s in samples:
            tiles += tile(s, tile_size) if tile_size else [s]
        return cls(spec, tiles, tile_size)

    def _scan(self, root: Path) -> None:
        img_dir, mask_dir = root / "images", root / "masks"
        if not img_dir.is_dir() or not mask_dir.is_dir():
            raise DataError(f"source '{self.name}': expected {root}/images and {root}/masks")
        images, masks = data._stems(img_dir), data._stems(mask_dir)
        for stem in sorted(set(images) & set(masks)):
            with Image.open(images[stem]) as im:
                w, h = im.size
            corners = data.tile_grid(h, w, self.tile_size) if self.tile_size else [(0, 0)]
            self._index += [(images[stem], masks[stem], y, x) for y, x in corners]

    def _load_full(self, img_path: Path, mask_path: Path) -> SegSample:
        return SegSample(data.read_rgb(img_path), data.read_mask(mask_path))

    def __len__(self) -> int:
        return len(self._tiles) if self._tiles is not None else len(self._index)

    def __getitem__(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Image and binary mask of tile ``k``."""
        if self._tiles is not None:
            s = self._tiles[k]
        else:
            ip, mp, y, x = self._index[k]
            full = self._load(ip, mp)
            if self.tile_size:
                s = SegSample(data.crop(full.image, y, x, self.tile_size),
                              data.crop(full.mask, y, x, self.tile_size))
            else:
                s = full
        return s.image, binarize_mask(s.mask, self.spec)


def load_sources(manifest: DatasetManifest) -> dict[str, SegSource]:
    return {s.name: SegSource(s, tile_size=manifest.tile_size) for s in manifest.sources}


def pair_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Generator for one sample; independent of worker layout."""
    return np.random.default_rng([seed, epoch, index])


def sample_pair(manifest: DatasetManifest, sources: Mapping[str, SegSource],
                rng: np.random.Generator) -> PseudoChangeSample:
    """Pick a source by proportion, then an ordered pair ``i != j`` within it."""
    probs = np.array([s.proportion for s in manifest.sources], dtype=np.float64)
    spec = manifest.sources[int(rng.choice(len(probs), p=probs / probs.sum()))]
    src = sources[spec.name]
    n = len(src)
    if n < 2:
        raise CapacityError(f"source '{spec.name}' has {n} sample(s); need at least 2")
    i = int(rng.integers(n))
    j = int(rng.integers(n - 1))
    if j >= i:
        j += 1
    img_a, seg_a = src[i]
    img_b, seg_b = src[j]
    if img_a.shape != img_b.shape:
        raise StructuralError(f"source '{spec.name}': tiles {i} and {j} differ in size; set a tile size")
    return PseudoChangeSample(img_a, img_b, seg_a, seg_b, xor_label(seg_a, seg_b), spec.name, (i, j))


def pseudo_stream(manifest: DatasetManifest, sources: Mapping[str, SegSource],
                  epoch: int = 0, count: int | None = None) -> Iterator[PseudoChangeSample]:
    n = manifest.samples_per_epoch if count is None else count
    for k in range(n):
        yield sample_pair(manifest, sources, pair_rng(manifest.seed, epoch, k))


@dataclass
class AugmentConfig:
    hflip: float = 0.5
    vflip: float = 0.5
    rotate: float = 0.5
    # degrees; 0 keeps rotations to multiples of 90 so masks stay exact
    rotate_max_angle: float = 0.0
    noise: float = 0.5
    noise_std: float = 0.02

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(hflip=0.0, vflip=0.0, rotate=0.0, noise=0.0)


def _geometric(arrays: list[np.ndarray], fn) -> list[np.ndarray]:
    return [np.ascontiguousarray(fn(a)) for a in arrays]


def transform(images: list[np.ndarray], masks: list[np.ndarray], cfg: AugmentConfig,
              rng: np.random.Generator) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Apply one random flip/rotation to every array; add noise to images only."""
    if rng.random() < cfg.hflip:
        images, masks = _geometric(images, np.fliplr), _geometric(masks, np.fliplr)
    if rng.random() < cfg.vflip:
        images, masks = _geometric(images, np.flipud), _geometric(masks, np.flipud)
    if rng.random() < cfg.rotate:
        if cfg.rotate_max_angle > 0:
            angle = float(rng.uniform(-cfg.rotate_max_angle, cfg.rotate_max_angle))
            images = _geometric(images, lambda a: ndimage.rotate(a, angle, axes=(1, 0), reshape=False,
                                                                  order=1, mode="constant"))
            masks = _geometric(masks, lambda a: ndimage.rotate(a, angle, axes=(1, 0), reshape=False,
                                                                order=0, mode="constant"))
        else:
            k = int(rng.integers(1, 4))
            images = _geometric(images, lambda a: np.rot90(a, k))
            masks = _geometric(masks, lambda a: np.rot90(a, k))
    if rng.random() < cfg.noise:
        images = [np.clip(a + rng.normal(0.0, cfg.noise_std, a.shape).astype(a.dtype), 0.0, 1.0)
                  for a in images]
    return images, masks


def augment(s: PseudoChangeSample, cfg: AugmentConfig, rng: np.random.Generator) -> PseudoChangeSample:
    images, masks = transform([s.image_a, s.image_b], [s.seg_a, s.seg_b, s.label], cfg, rng)
    return PseudoChangeSample(images[0], images[1], masks[0], masks[1], masks[2], s.source, s.indices)


def export_dataset(manifest: DatasetManifest, sources: Mapping[str, SegSource], n: int,
                   out_dir: str | Path, epoch: int = 0) -> Path:
    """Write ``n`` pairs as ``A/ B/ label/ segA/ segB/`` PNGs plus ``manifest.yaml``."""
    out = Path(out_dir)
    width = max(4, int(math.log10(max(n, 1))) + 1)
    counts = {s.name: 0 for s in manifest.sources}
    for k, s in enumerate(pseudo_stream(manifest, sources, epoch, n)):
        name = f"{k:0{width}d}.png"
        data.write_rgb(out / "A" / name, s.image_a)
        data.write_rgb(out / "B" / name, s.image_b)
        data.write_binary(out / "label" / name, s.label)
        data.write_binary(out / "segA" / name, s.seg_a)
        data.write_binary(out / "segB" / name, s.seg_b)
        counts[s.source] += 1
    record = manifest.to_dict()
    record.update(count=n, epoch=epoch, drawn=counts)
    path = out / "manifest.yaml"
    try:
        path.write_text(yaml.safe_dump(record, sort_keys=True))
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc
    return path


def pair_capacity(n: int) -> int:
    """Number of distinct ordered pairs ``(i, j), i != j``."""
    return n * (n - 1)
