"""PNG I/O and the ``A/ B/ label/`` bi-temporal dataset layout."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .errors import DataError, DomainError, StructuralError

IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".jpg", ".jpeg", ".bmp")


def read_rgb(path: str | Path) -> np.ndarray:
    """HxWx3 float32 image scaled to [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def read_mask(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L") if im.mode not in ("L", "P", "I", "I;16") else im).astype(np.int64)
    except OSError as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc


def read_binary(path: str | Path) -> np.ndarray:
    """Binary label from a 0/255 (or 0/1) single-channel PNG."""
    m = read_mask(path)
    return (m > 0).astype(np.uint8)


def write_rgb(path: str | Path, img: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    _save(path, Image.fromarray(arr, mode="RGB"))


def write_binary(path: str | Path, mask: np.ndarray) -> None:
    m = np.asarray(mask)
    if m.size and not np.isin(m, (0, 1)).all():
        raise DomainError(f"{path}: binary mask must contain only 0 and 1")
    _save(path, Image.fromarray((m.astype(np.uint8) * 255), mode="L"))


def write_prob(path: str | Path, probs: np.ndarray) -> None:
    """8-bit grayscale ``round(255 * p)``."""
    arr = np.clip(np.rint(np.asarray(probs, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    _save(path, Image.fromarray(arr, mode="L"))


def read_prob(path: str | Path) -> np.ndarray:
    return read_mask(path).astype(np.float32) / 255.0


def _save(path: str | Path, im: Image.Image) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        im.save(path, format="PNG")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def _stems(folder: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def pad_to(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    pad = [(0, h - arr.shape[0]), (0, w - arr.shape[1])] + [(0, 0)] * (arr.ndim - 2)
    return np.pad(arr, pad)


def tile_grid(h: int, w: int, size: int) -> list[tuple[int, int]]:
    """Top-left corners of the non-overlapping tiles covering an ``h x w`` image."""
    return [(y, x) for y in range(0, h, size) for x in range(0, w, size)]


def crop(arr: np.ndarray, y: int, x: int, size: int) -> np.ndarray:
    """``size x size`` window, zero padded past the image border."""
    window = arr[y:y + size, x:x + size]
    if window.shape[:2] != (size, size):
        window = pad_to(window, size, size)
    return window


@dataclass
class ChangePair:
    name: str
    image_a: np.ndarray
    image_b: np.ndarray
    label: np.ndarray | None


class ChangeDataset:
    """Bi-temporal pairs from ``root/A``, ``root/B`` and optionally ``root/label``.

    With ``crop_size`` every pair is split into zero-padded non-overlapping
    tiles, named ``<stem>_<row>_<col>``.
    """

    def __init__(self, root: str | Path, crop_size: int | None = None,
                 names: Sequence[str] | None = None, require_labels: bool = True):
        self.root = Path(root)
        for sub in ("A", "B"):
            if not (self.root / sub).is_dir():
                raise DataError(f"{self.root}: missing '{sub}/' directory")
        a, b = _stems(self.root / "A"), _stems(self.root / "B")
        label_dir = self.root / "label"
        labels = _stems(label_dir) if label_dir.is_dir() else {}
        if require_labels and not labels:
            raise DataError(f"{self.root}: missing 'label/' directory or it is empty")
        stems = sorted(set(a) & set(b))
        if names is not None:
            wanted = set(names)
            stems = [s for s in stems if s in wanted]
        if require_labels:
            missing = [s for s in stems if s not in labels]
            if missing:
                raise DataError(f"{self.root}: no label for '{missing[0]}'")
        if not stems:
            raise DataError(f"{self.root}: no image pairs found")
        self.paths = {s: (a[s], b[s], labels.get(s)) for s in stems}
        self.stems = stems
        self.crop_size = crop_size
        self.index: list[tuple[str, int, int]] = []
        for s in stems:
            if crop_size:
                with Image.open(a[s]) as im:
                    w, h = im.size
                self.index += [(s, y, x) for y, x in tile_grid(h, w, crop_size)]
            else:
                self.index.append((s, 0, 0))
        self._load = lru_cache(maxsize=8)(self._load_full)

    def __len__(self) -> int:
        return len(self.index)

    def _load_full(self, stem: str):
        pa, pb, pl = self.paths[stem]
        a, b = read_rgb(pa), read_rgb(pb)
        if a.shape != b.shape:
            raise StructuralError(f"{stem}: A has shape {a.shape}, B has shape {b.shape}")
        lab = read_binary(pl) if pl is not None else None
        if lab is not None and lab.shape != a.shape[:2]:
            raise StructuralError(f"{stem}: label shape {lab.shape} != image shape {a.shape[:2]}")
        return a, b, lab

    def __getitem__(self, k: int) -> ChangePair:
        stem, y, x = self.index[k]
        a, b, lab = self._load(stem)
        if not self.crop_size:
            return ChangePair(stem, a, b, lab)
        s = self.crop_size
        name = f"{stem}_{y // s}_{x // s}"
        return ChangePair(name, crop(a, y, x, s), crop(b, y, x, s),
                          crop(lab, y, x, s) if lab is not None else None)


def split_dirs(dataset_dir: str | Path) -> dict[str, Path]:
    """``train/val/test`` subdirectories if present, else the root as ``train``."""
    root = Path(dataset_dir)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    splits = {s: root / s for s in ("train", "val", "test") if (root / s / "A").is_dir()}
    if not splits:
        if not (root / "A").is_dir():
            raise DataError(f"{root}: expected A/ B/ label/ or train/ val/ test/ subdirectories")
        splits = {"train": root}
    return splits


def holdout_split(names: Sequence[str], fraction: float, seed: int) -> tuple[list[str], list[str]]:
    names = sorted(names)
    n_val = int(round(len(names) * fraction))
    if n_val == 0:
        return names, []
    order = np.random.default_rng(seed).permutation(len(names))
    val = sorted(names[i] for i in order[:n_val])
    return [n for n in names if n not in set(val)], val


def to_tensor(images: Sequence[np.ndarray] | np.ndarray, mean: Sequence[float],
              std: Sequence[float]) -> torch.Tensor:
    """Stack HxWx3 [0,1] images into a normalized (N, 3, H, W) float tensor."""
    x = torch.from_numpy(np.ascontiguousarray(np.stack(images), dtype=np.float32)).permute(0, 3, 1, 2)
    m = torch.tensor(mean, dtype=torch.float32).view(1, 3, 1, 1)
    s = torch.tensor(std, dtype=torch.float32).view(1, 3, 1, 1)
    return (x - m) / s
