"""Frozen foundation-model encoder and the trainable change-detection adapter.

The encoder is any layer stack whose tapped outputs sit at strides 4, 8, 16
and 32.  Real foundation backbones (FastSAM-style YOLO checkpoints) are loaded
lazily through ``ultralytics``; the ``synthetic-test`` variant is a small
random CNN with the same pyramid contract so everything runs offline.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import torch
from torch import nn

from .errors import DimensionError, LoadError, StructuralError

log = logging.getLogger(__name__)

VARIANTS = ("foundation-x", "foundation-s", "synthetic-test")
PYRAMID_STRIDES = (4, 8, 16, 32)
DEFAULT_TAPS = {
    # final layer of each stage in the YOLOv8-seg layout FastSAM inherits
    "foundation-x": (2, 15, 18, 21),
    "foundation-s": (2, 15, 18, 21),
    "synthetic-test": (1, 2, 3, 4),
}
SYNTHETIC_CHANNELS = (16, 32, 48, 64)


class EncoderHandle(nn.Module):
    """A frozen layer stack plus the indices of the layers feeding the pyramid.

    Layers may carry an ultralytics-style ``f`` attribute (index or list of
    indices of earlier outputs to consume); plain layers consume the previous
    output.
    """

    def __init__(self, layers: Sequence[nn.Module], taps: Sequence[int], variant: str):
        super().__init__()
        if len(taps) != 4:
            raise StructuralError(f"need exactly 4 tap layers, got {list(taps)}")
        self.layers = nn.ModuleList(layers)
        self.taps = tuple(int(t) for t in taps)
        self.variant = variant
        self.channels: tuple[int, ...] = ()
        freeze(self)

    def train(self, mode: bool = True):
        # batch-norm statistics inside the backbone must never move
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        outputs: list = []
        last = max(self.taps)
        for m in self.layers:
            f = getattr(m, "f", -1)
            if f != -1:
                x = outputs[f] if isinstance(f, int) else [x if j == -1 else outputs[j] for j in f]
            x = m(x)
            outputs.append(x)
            if len(outputs) > last:
                break
        return [outputs[t] for t in self.taps]


def freeze(module: nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()


def _conv(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.ReLU(inplace=True))


def synthetic_backbone(seed: int = 7, channels: Sequence[int] = SYNTHETIC_CHANNELS) -> list[nn.Module]:
    """Stem (stride 2) followed by four stride-2 stages; outputs 1..4 are the pyramid."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        layers = [_conv(3, channels[0])]
        cin = channels[0]
        for c in channels:
            layers.append(_conv(cin, c))
            cin = c
        for m in layers:
            conv = m[0]
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            nn.init.uniform_(conv.bias, -0.1, 0.1)
    return layers


def _check_state(module: nn.Module, state: dict, path: Path) -> None:
    own = module.state_dict()
    for key, value in own.items():
        if key not in state:
            raise StructuralError(f"{path}: missing layer '{key}'")
        if tuple(state[key].shape) != tuple(value.shape):
            raise StructuralError(
                f"{path}: layer '{key}' has shape {tuple(state[key].shape)}, expected {tuple(value.shape)}")
    extra = sorted(set(state) - set(own))
    if extra:
        raise StructuralError(f"{path}: unexpected layer '{extra[0]}'")


def _load_foundation(path: Path, variant: str) -> list[nn.Module]:
    try:
        import ultralytics  # noqa: F401  (registers the classes pickled in the checkpoint)
    except ImportError as exc:
        raise LoadError(f"{path}: loading '{variant}' weights requires the 'ultralytics' package") from exc
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise LoadError(f"{path}: cannot read weights ({exc})") from exc
    model = ckpt
    if isinstance(ckpt, dict):
        model = ckpt.get("ema") if ckpt.get("ema") is not None else ckpt.get("model")
    if model is None or not hasattr(model, "model"):
        raise LoadError(f"{path}: no layer stack found in checkpoint")
    scale = getattr(model, "yaml", {}).get("scale")
    expected = variant.split("-")[1]
    if scale is not None and scale != expected:
        raise StructuralError(f"{path}: checkpoint scale '{scale}' does not match variant '{variant}'")
    return list(model.float().model)


def load_backbone(weights_path: str | Path | None, variant: str, *, seed: int = 7,
                  taps: Sequence[int] | None = None) -> EncoderHandle:
    """Build a frozen encoder.

    ``synthetic-test`` needs no file; when ``weights_path`` is given it must hold
    a state dict matching the synthetic layout. Foundation variants always need
    a file.
    """
    if variant not in VARIANTS:
        raise LoadError(f"unknown encoder variant '{variant}', expected one of {VARIANTS}")
    taps = tuple(taps) if taps is not None else DEFAULT_TAPS[variant]
    path = Path(weights_path) if weights_path else None

    if variant == "synthetic-test":
        layers = synthetic_backbone(seed)
        if path is not None:
            if not path.is_file():
                raise LoadError(f"weights file not found: {path}")
            try:
                state = torch.load(path, map_location="cpu", weights_only=True)
            except Exception as exc:
                raise LoadError(f"{path}: cannot read weights ({exc})") from exc
            stack = nn.ModuleList(layers)
            _check_state(stack, state, path)
            stack.load_state_dict(state)
    else:
        if path is None or not path.is_file():
            raise LoadError(f"weights file not found: {path}")
        layers = _load_foundation(path, variant)

    handle = EncoderHandle(layers, taps, variant)
    _probe(handle, path)
    log.info("loaded %s encoder, taps=%s, channels=%s", variant, handle.taps, handle.channels)
    return handle


def _probe(handle: EncoderHandle, path: Path | None) -> None:
    """Run a dummy image through the stack and check each tap's stride."""
    size = 64
    with torch.no_grad():
        feats = handle(torch.zeros(1, 3, size, size))
    for tap, f, stride in zip(handle.taps, feats, PYRAMID_STRIDES):
        if not isinstance(f, torch.Tensor) or f.shape[-1] != size // stride:
            got = tuple(f.shape) if isinstance(f, torch.Tensor) else type(f).__name__
            raise StructuralError(f"{path or 'synthetic'}: tap layer {tap} gives {got}, "
                                  f"expected stride {stride}")
    handle.channels = tuple(int(f.shape[1]) for f in feats)


def check_image(img: torch.Tensor) -> None:
    if img.dim() != 4:
        raise DimensionError(f"expected a (N, 3, H, W) batch, got shape {tuple(img.shape)}")
    n, c, h, w = img.shape
    if c != 3:
        raise DimensionError(f"expected 3 channels, got {c}")
    if h % 32 or w % 32:
        raise DimensionError(f"image size {h}x{w} must be a multiple of 32 in both dimensions")


def extract_pyramid(enc: EncoderHandle, img: torch.Tensor) -> list[torch.Tensor]:
    """Four feature maps at strides 4/8/16/32; never tracked by autograd."""
    check_image(img)
    with torch.no_grad():
        feats = enc(img)
    h, w = img.shape[-2:]
    for level, (f, s) in enumerate(zip(feats, PYRAMID_STRIDES)):
        if tuple(f.shape[-2:]) != (h // s, w // s):
            raise StructuralError(f"pyramid level {level} has size {tuple(f.shape[-2:])}, "
                                  f"expected {(h // s, w // s)}")
    return feats


def normalize(img: torch.Tensor, mean: Sequence[float], std: Sequence[float]) -> torch.Tensor:
    m = torch.as_tensor(mean, dtype=img.dtype, device=img.device).view(1, -1, 1, 1)
    s = torch.as_tensor(std, dtype=img.dtype, device=img.device).view(1, -1, 1, 1)
    return (img - m) / s


class Adapter(nn.Module):
    """Per-level 1x1 conv + BN + ReLU projecting every level to ``out_channels``."""

    def __init__(self, in_channels: Sequence[int], out_channels: int = 64):
        super().__init__()
        self.in_channels = tuple(in_channels)
        self.out_channels = out_channels
        self.blocks = nn.ModuleList(
            nn.Sequential(nn.Conv2d(c, out_channels, 1, bias=False),
                          nn.BatchNorm2d(out_channels),
                          nn.ReLU(inplace=True))
            for c in in_channels)

    def forward(self, pyramid: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        if len(pyramid) != len(self.blocks):
            raise StructuralError(f"expected {len(self.blocks)} pyramid levels, got {len(pyramid)}")
        out = []
        for i, (x, block) in enumerate(zip(pyramid, self.blocks)):
            if x.shape[1] != self.in_channels[i]:
                raise StructuralError(
                    f"pyramid level {i} has {x.shape[1]} channels, adapter expects {self.in_channels[i]}")
            out.append(block(x))
        return out


def adapt(pyramid: Sequence[torch.Tensor], adapter: Adapter) -> list[torch.Tensor]:
    return adapter(pyramid)
