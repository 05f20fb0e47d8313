"""Confusion counting and precision / recall / F1 / IoU."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np
import torch

from .errors import StructuralError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    f1: float
    iou: float
    counts: ConfusionCounts
    # names of metrics whose denominator was zero and got the 1.0/0.0 sentinel
    degenerate: tuple[str, ...] = field(default_factory=tuple)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["degenerate"] = list(self.degenerate)
        return d

    def format(self) -> str:
        c = self.counts
        return (f"{'precision':>10} {'recall':>10} {'f1':>10} {'iou':>10}\n"
                f"{self.precision:>10.4f} {self.recall:>10.4f} {self.f1:>10.4f} {self.iou:>10.4f}\n"
                f"tp={c.tp} fp={c.fp} fn={c.fn} tn={c.tn}")


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def confusion(pred, gt, threshold: float = 0.5) -> ConfusionCounts:
    """Binarize ``pred`` at ``>= threshold`` and tally against binary ``gt``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie strictly between 0 and 1")
    p = _as_numpy(pred)
    g = _as_numpy(gt)
    if p.shape != g.shape:
        raise StructuralError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    pb = p >= threshold
    gb = g.astype(bool)
    tp = int(np.count_nonzero(pb & gb))
    fp = int(np.count_nonzero(pb & ~gb))
    fn = int(np.count_nonzero(~pb & gb))
    tn = int(pb.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(num: int, den: int, present: bool) -> tuple[float, bool]:
    if den > 0:
        return num / den, False
    # nothing predicted and nothing present counts as a perfect score
    return (0.0 if present else 1.0), True


def report(c: ConfusionCounts) -> MetricsReport:
    present = c.tp + c.fn > 0
    degenerate = []
    precision, bad = _ratio(c.tp, c.tp + c.fp, present)
    if bad:
        degenerate.append("precision")
    recall, bad = _ratio(c.tp, c.tp + c.fn, c.tp + c.fp > 0)
    if bad:
        degenerate.append("recall")
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
    iou, bad = _ratio(c.tp, c.tp + c.fp + c.fn, present)
    if bad:
        degenerate.append("iou")
    if c.tp + c.fp + c.fn == 0:
        degenerate.append("f1")
    return MetricsReport(precision, recall, f1, iou, c, tuple(degenerate))


def report_from_pr(precision: float, recall: float) -> tuple[float, float]:
    """F1 and IoU implied by a precision/recall pair under pixel counting."""
    f1 = 2 * precision * recall / (precision + recall)
    return f1, f1 / (2 - f1)


def accumulate(cs: Iterable[ConfusionCounts]) -> ConfusionCounts:
    total = ConfusionCounts()
    for c in cs:
        total = total + c
    return total
