"""Losses, schedule, checkpoints and the pre-training / fine-tuning loops."""
from __future__ import annotations

import logging
import math
import re
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
import torch

from . import data
from .config import Config, TrainConfig
from .errors import CompatibilityError, DataError, DomainError, LoadError, NumericError, StructuralError
from .metrics import ConfusionCounts, MetricsReport, accumulate, confusion, report
from .model import SACDNet, SegHead, build_model, seg_forward
from .pseudochange import (DatasetManifest, SegSource, augment, load_sources,
                           pseudo_stream, transform)

log = logging.getLogger(__name__)

EPS = 1e-7
LOG_COLUMNS = ("epoch", "lr", "loss", "loss_semantic", "loss_difference", "loss_seg", "loss_fused",
               "val_precision", "val_recall", "val_f1", "val_iou")

__all__ = [
    "SegHead", "seg_forward", "bce", "seg_ce", "change_loss", "pretrain_loss", "finetune_loss",
    "lr_at", "Trainer", "save_checkpoint", "load_checkpoint", "restore", "run_pretrain",
    "run_finetune", "evaluate_model", "predict_batch", "predict_full",
]


def _check_binary(y: torch.Tensor) -> None:
    if not ((y == 0) | (y == 1)).all():
        raise DomainError("change target must be binary (0/1)")


def bce(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Pixel-mean binary cross-entropy on probabilities clamped to [1e-7, 1 - 1e-7]."""
    if p.shape != y.shape:
        raise StructuralError(f"prediction shape {tuple(p.shape)} != target shape {tuple(y.shape)}")
    p = p.clamp(EPS, 1 - EPS)
    y = y.to(p.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def seg_ce(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Pixel-mean cross-entropy of (N, K, H, W) class probabilities against (N, H, W) ids."""
    if probs.shape[0] != target.shape[0] or probs.shape[2:] != target.shape[1:]:
        raise StructuralError(f"segmentation shape {tuple(probs.shape)} vs target {tuple(target.shape)}")
    t = target.long()
    if t.min() < 0 or t.max() >= probs.shape[1]:
        raise DomainError(f"segmentation target ids must lie in 0..{probs.shape[1] - 1}")
    picked = probs.gather(1, t.unsqueeze(1)).squeeze(1)
    return -torch.log(picked.clamp(EPS, 1.0)).mean()


def change_loss(semantic: torch.Tensor, difference: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    _check_binary(y)
    return bce(semantic, y) + bce(difference, y)


def pretrain_loss(semantic, difference, seg_a, seg_b, y, target_a, target_b, seg_weight: float = 1.0):
    if seg_weight < 0:
        raise DomainError("seg_weight must be >= 0")
    return change_loss(semantic, difference, y) + seg_weight * (seg_ce(seg_a, target_a) + seg_ce(seg_b, target_b))


def finetune_loss(semantic, difference, fused, y) -> torch.Tensor:
    _check_binary(y)
    return bce(semantic, y) + bce(difference, y) + bce(fused, y)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch < cfg.num_epochs:
        raise ValueError(f"epoch {epoch} outside 0..{cfg.num_epochs - 1}")
    return cfg.initial_lr * cfg.gamma ** epoch


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


class Trainer:
    """One SGD optimizer over the phase's trainable parts; ``step`` does one update."""

    def __init__(self, model: SACDNet, cfg: Config, device: str | torch.device = "cpu"):
        self.model = model.to(device)
        self.cfg = cfg
        self.device = torch.device(device)
        t = cfg.train
        self.optimizer = torch.optim.SGD(model.trainable_parameters(), lr=t.initial_lr,
                                         momentum=t.momentum, weight_decay=t.weight_decay)
        self.steps = 0
        self.history: list[float] = []
        self.epoch = 0

    def set_epoch(self, epoch: int) -> float:
        self.epoch = epoch
        lr = lr_at(epoch, self.cfg.train)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        return lr

    def losses(self, batch: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        out = self.model(batch["a"], batch["b"])
        y = batch["label"]
        _check_binary(y)
        terms = {"semantic": bce(out["semantic"], y), "difference": bce(out["difference"], y)}
        if self.model.phase == "pretrain":
            seg = seg_ce(out["seg_a"], batch["seg_a"]) + seg_ce(out["seg_b"], batch["seg_b"])
            terms["seg"] = seg
            terms["total"] = terms["semantic"] + terms["difference"] + self.cfg.train.seg_weight * seg
        else:
            terms["fused"] = bce(out["fused"], y)
            terms["total"] = terms["semantic"] + terms["difference"] + terms["fused"]
        return terms

    def step(self, batch: Mapping[str, torch.Tensor]) -> dict[str, float]:
        self.model.train()
        batch = {k: v.to(self.device) for k, v in batch.items()}
        terms = self.losses(batch)
        total = terms["total"]
        if not torch.isfinite(total):
            raise NumericError(f"non-finite loss at epoch {self.epoch}, step {self.steps}",
                               epoch=self.epoch, step=self.steps, history=self.history[-20:])
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        self.steps += 1
        values = {k: float(v.detach()) for k, v in terms.items()}
        self.history.append(values["total"])
        return values


def make_batch(images_a, images_b, labels, cfg: Config, seg_a=None, seg_b=None) -> dict[str, torch.Tensor]:
    norm = cfg.encoder.normalize
    batch = {
        "a": data.to_tensor(images_a, norm.mean, norm.std),
        "b": data.to_tensor(images_b, norm.mean, norm.std),
        "label": torch.from_numpy(np.stack(labels).astype(np.float32)),
    }
    if seg_a is not None:
        batch["seg_a"] = torch.from_numpy(np.stack(seg_a).astype(np.int64))
        batch["seg_b"] = torch.from_numpy(np.stack(seg_b).astype(np.int64))
    return batch


def pseudo_batches(cfg: Config, manifest: DatasetManifest, sources: Mapping[str, SegSource],
                   epoch: int) -> Iterator[dict[str, torch.Tensor]]:
    bs = cfg.train.batch_size
    buf = []
    for k, s in enumerate(pseudo_stream(manifest, sources, epoch, cfg.train.samples_per_epoch)):
        buf.append(augment(s, cfg.augment, np.random.default_rng([manifest.seed, epoch, k, 1])))
        if len(buf) == bs:
            yield make_batch([b.image_a for b in buf], [b.image_b for b in buf], [b.label for b in buf],
                             cfg, [b.seg_a for b in buf], [b.seg_b for b in buf])
            buf = []
    if buf:
        yield make_batch([b.image_a for b in buf], [b.image_b for b in buf], [b.label for b in buf],
                         cfg, [b.seg_a for b in buf], [b.seg_b for b in buf])


def change_batches(cfg: Config, dataset: Sequence[data.ChangePair], epoch: int,
                   augment_data: bool = True) -> Iterator[dict[str, torch.Tensor]]:
    seed = cfg.train.seed
    order = np.random.default_rng([seed, epoch]).permutation(len(dataset))
    bs = cfg.train.batch_size
    for start in range(0, len(order), bs):
        a, b, y = [], [], []
        for k in order[start:start + bs]:
            pair = dataset[int(k)]
            if pair.label is None:
                raise DataError(f"pair '{pair.name}' has no label")
            images, masks = [pair.image_a, pair.image_b], [pair.label]
            if augment_data:
                images, masks = transform(images, masks, cfg.augment,
                                          np.random.default_rng([seed, epoch, int(k), 1]))
            a.append(images[0])
            b.append(images[1])
            y.append(masks[0])
        yield make_batch(a, b, y, cfg)


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(path: str | Path, model: SACDNet, cfg: Config, epoch: int,
                    optimizer: torch.optim.Optimizer | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {
        "phase": model.phase,
        "epoch": epoch,
        "config_hash": cfg.arch_hash(),
        "config": cfg.to_dict(),
        "components": {name: m.state_dict() for name, m in model.components().items()},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }
    torch.save(state, path)
    return path


def latest_checkpoint(run_dir: str | Path) -> Path:
    run_dir = Path(run_dir)
    found = []
    for p in run_dir.glob("epoch_*.pt"):
        m = re.fullmatch(r"epoch_(\d+)\.pt", p.name)
        if m:
            found.append((int(m.group(1)), p))
    if not found:
        raise LoadError(f"no epoch_<n>.pt checkpoints under {run_dir}")
    return max(found)[1]


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = latest_checkpoint(path)
    if not path.is_file():
        raise LoadError(f"checkpoint not found: {path}")
    try:
        return torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise LoadError(f"{path}: cannot read checkpoint ({exc})") from exc


def restore(model: SACDNet, ckpt: Mapping, cfg: Config) -> list[str]:
    """Load every component present in both the checkpoint and the model."""
    if ckpt["config_hash"] != cfg.arch_hash():
        raise CompatibilityError(f"checkpoint architecture {ckpt['config_hash']} does not match "
                                 f"config {cfg.arch_hash()}")
    loaded = []
    for name, module in model.components().items():
        if name in ckpt["components"]:
            module.load_state_dict(ckpt["components"][name])
            loaded.append(name)
    return loaded


# --- evaluation --------------------------------------------------------------

@torch.no_grad()
def predict_batch(model: SACDNet, xa: torch.Tensor, xb: torch.Tensor) -> dict[str, torch.Tensor]:
    model.eval()
    return model(xa, xb)


BRANCHES = ("semantic", "difference", "fused")


@torch.no_grad()
def predict_full(model: SACDNet, image_a: np.ndarray, image_b: np.ndarray, cfg: Config,
                 device: str | torch.device = "cpu") -> dict[str, np.ndarray]:
    """Probability maps for an arbitrary-size pair.

    The pair is zero-padded to whole tiles of ``train.crop_size`` (or to a
    multiple of 32 without a crop size), run tile by tile and stitched.
    """
    h, w = image_a.shape[:2]
    size = cfg.train.crop_size
    if size:
        ph, pw = -(-h // size) * size, -(-w // size) * size
        corners = data.tile_grid(ph, pw, size)
    else:
        ph, pw = -(-h // 32) * 32, -(-w // 32) * 32
        corners, size = [(0, 0)], None
    a, b = data.pad_to(image_a, ph, pw), data.pad_to(image_b, ph, pw)
    norm = cfg.encoder.normalize
    out: dict[str, np.ndarray] = {}
    bs = cfg.eval.batch_size
    for start in range(0, len(corners), bs):
        chunk = corners[start:start + bs]
        if size:
            ta = [data.crop(a, y, x, size) for y, x in chunk]
            tb = [data.crop(b, y, x, size) for y, x in chunk]
        else:
            ta, tb = [a], [b]
        res = predict_batch(model, data.to_tensor(ta, norm.mean, norm.std).to(device),
                            data.to_tensor(tb, norm.mean, norm.std).to(device))
        for name, probs in res.items():
            if name not in BRANCHES:
                continue
            full = out.setdefault(name, np.zeros((ph, pw), dtype=np.float32))
            probs = probs.cpu().numpy()
            for (y, x), pr in zip(chunk, probs):
                full[y:y + pr.shape[0], x:x + pr.shape[1]] = pr
    return {k: v[:h, :w] for k, v in out.items()}


def evaluate_model(model: SACDNet, dataset: Sequence[data.ChangePair], cfg: Config,
                   branch: str = "fused", threshold: float | None = None,
                   device: str | torch.device = "cpu") -> tuple[MetricsReport, dict[str, ConfusionCounts]]:
    """Micro-averaged metrics over ``dataset`` plus per-image counts."""
    threshold = cfg.eval.threshold if threshold is None else threshold
    per_image: dict[str, ConfusionCounts] = {}
    for k in range(len(dataset)):
        pair = dataset[k]
        probs = predict_full(model, pair.image_a, pair.image_b, cfg, device)
        if branch not in probs:
            raise StructuralError(f"model in phase '{model.phase}' has no '{branch}' output")
        per_image[pair.name] = confusion(probs[branch], pair.label, threshold)
    return report(accumulate(per_image.values())), per_image


# --- loops -------------------------------------------------------------------

class RunLog:
    """Tab-separated per-epoch log with a fixed column order."""

    def __init__(self, path: Path):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\t".join(LOG_COLUMNS) + "\n")

    def write(self, **values) -> None:
        cells = []
        for col in LOG_COLUMNS:
            v = values.get(col, math.nan)
            cells.append(str(v) if col == "epoch" else f"{v:.6g}")
        with self.path.open("a") as f:
            f.write("\t".join(cells) + "\n")


def _epoch_means(rows: Iterable[dict[str, float]]) -> dict[str, float]:
    rows = list(rows)
    if not rows:
        return {}
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


def _limited(batches: Iterator, limit: int | None) -> Iterator:
    for k, b in enumerate(batches):
        if limit is not None and k >= limit:
            break
        yield b


def run_pretrain(cfg: Config, manifest: DatasetManifest, run_dir: str | Path,
                 sources: Mapping[str, SegSource] | None = None, device: str = "cpu") -> Path:
    """Train adapter, both decoder branches and the segmentation head on pseudo pairs."""
    cfg.train.phase = "pretrain"
    cfg.train.validate()
    run_dir = Path(run_dir)
    seed_everything(cfg.train.seed)
    sources = sources if sources is not None else load_sources(manifest)
    model = build_model(cfg, "pretrain")
    trainer = Trainer(model, cfg, device)
    runlog = RunLog(run_dir / "metrics.log")
    ckpt = None
    for epoch in range(cfg.train.num_epochs):
        lr = trainer.set_epoch(epoch)
        rows = [trainer.step(b) for b in _limited(pseudo_batches(cfg, manifest, sources, epoch),
                                                   cfg.train.max_steps_per_epoch)]
        means = _epoch_means(rows)
        runlog.write(epoch=epoch + 1, lr=lr, loss=means["total"], loss_semantic=means["semantic"],
                     loss_difference=means["difference"], loss_seg=means["seg"])
        log.info("pretrain epoch %d lr %.4g loss %.4f", epoch + 1, lr, means["total"])
        ckpt = save_checkpoint(run_dir / f"epoch_{epoch + 1}.pt", model, cfg, epoch + 1, trainer.optimizer)
    return ckpt


def finetune_splits(cfg: Config, dataset_dir: str | Path) -> tuple[data.ChangeDataset, data.ChangeDataset | None]:
    splits = data.split_dirs(dataset_dir)
    crop = cfg.train.crop_size
    train = data.ChangeDataset(splits["train"], crop)
    if "val" in splits:
        return train, data.ChangeDataset(splits["val"], crop)
    names, val_names = data.holdout_split(train.stems, cfg.train.val_fraction, cfg.train.seed)
    if not val_names:
        return train, None
    return (data.ChangeDataset(splits["train"], crop, names),
            data.ChangeDataset(splits["train"], crop, val_names))


def run_finetune(cfg: Config, dataset_dir: str | Path, run_dir: str | Path,
                 init: str | Path | Mapping | None = None, device: str = "cpu") -> Path:
    """Train adapter, decoder and fusion on a labelled change dataset."""
    cfg.train.phase = "finetune"
    cfg.train.validate()
    run_dir = Path(run_dir)
    seed_everything(cfg.train.seed)
    train_set, val_set = finetune_splits(cfg, dataset_dir)
    model = build_model(cfg, "finetune")
    if init is not None:
        ckpt = init if isinstance(init, Mapping) else load_checkpoint(init)
        loaded = restore(model, ckpt, cfg)
        log.info("initialized %s from checkpoint", ", ".join(loaded))
    trainer = Trainer(model, cfg, device)
    runlog = RunLog(run_dir / "metrics.log")
    ckpt_path = None
    for epoch in range(cfg.train.num_epochs):
        lr = trainer.set_epoch(epoch)
        rows = [trainer.step(b) for b in _limited(change_batches(cfg, train_set, epoch),
                                                   cfg.train.max_steps_per_epoch)]
        means = _epoch_means(rows)
        val = {}
        if val_set is not None:
            rep, _ = evaluate_model(model, val_set, cfg, device=device)
            val = dict(val_precision=rep.precision, val_recall=rep.recall, val_f1=rep.f1, val_iou=rep.iou)
        runlog.write(epoch=epoch + 1, lr=lr, loss=means["total"], loss_semantic=means["semantic"],
                     loss_difference=means["difference"], loss_fused=means["fused"], **val)
        log.info("finetune epoch %d lr %.4g loss %.4f", epoch + 1, lr, means["total"])
        ckpt_path = save_checkpoint(run_dir / f"epoch_{epoch + 1}.pt", model, cfg, epoch + 1, trainer.optimizer)
    return ckpt_path
