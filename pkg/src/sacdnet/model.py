"""SA-CDNet assembly and the proxy segmentation head."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .config import Config
from .decoder import DifferenceDecoder, SemanticDecoder, conv_block
from .encoder import Adapter, EncoderHandle, check_image, extract_pyramid, load_backbone
from .errors import ConfigError, StructuralError
from .fusion import Fusion


class SegHead(nn.Module):
    """conv+BN+ReLU then a 1x1 conv and softmax over classes, resized to the image."""

    def __init__(self, channels: int, num_classes: int = 2):
        super().__init__()
        self.block = conv_block(channels, channels)
        self.classifier = nn.Conv2d(channels, num_classes, 1)

    def forward(self, d: torch.Tensor, out_hw: tuple[int, int]) -> torch.Tensor:
        logits = self.classifier(self.block(d))
        if tuple(logits.shape[-2:]) != tuple(out_hw):
            logits = F.interpolate(logits, size=out_hw, mode="bilinear", align_corners=False)
        return torch.softmax(logits, dim=1)


def seg_forward(d1: torch.Tensor, d2: torch.Tensor, head: SegHead, out_hw: tuple[int, int]):
    if d1.shape != d2.shape:
        raise StructuralError(f"decoded feature shapes differ: {tuple(d1.shape)} vs {tuple(d2.shape)}")
    return head(d1, out_hw), head(d2, out_hw)


class SACDNet(nn.Module):
    """Frozen encoder, adapter, dual-stream decoder and a phase-specific tail.

    ``pretrain`` carries the segmentation head and no fusion; ``finetune``
    carries fusion and no segmentation head.
    """

    def __init__(self, encoder: EncoderHandle, phase: str = "finetune", adapter_channels: int = 64,
                 base_channels: int = 64, attention_reduction: int = 4,
                 fusion_strategy: str = "learnable", fusion_init: float = 0.0, seg_classes: int = 2):
        super().__init__()
        if phase not in ("pretrain", "finetune"):
            raise ConfigError(f"unknown phase '{phase}'")
        self.phase = phase
        self.encoder = encoder
        self.adapter = Adapter(encoder.channels, adapter_channels)
        self.semantic = SemanticDecoder(adapter_channels, base_channels)
        self.difference = DifferenceDecoder(adapter_channels, base_channels, attention_reduction)
        self.fusion = Fusion(fusion_strategy, fusion_init) if phase == "finetune" else None
        self.seg_head = SegHead(base_channels, seg_classes) if phase == "pretrain" else None

    def components(self) -> dict[str, nn.Module]:
        """Trainable parts, keyed the way checkpoints store them."""
        parts = {"adapter": self.adapter, "semantic": self.semantic, "difference": self.difference}
        if self.fusion is not None:
            parts["fusion"] = self.fusion
        if self.seg_head is not None:
            parts["seg_head"] = self.seg_head
        return parts

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for m in self.components().values() for p in m.parameters() if p.requires_grad]

    def forward(self, xa: torch.Tensor, xb: torch.Tensor) -> dict[str, torch.Tensor]:
        check_image(xa)
        if xa.shape != xb.shape:
            raise StructuralError(f"input shapes differ: {tuple(xa.shape)} vs {tuple(xb.shape)}")
        hw = tuple(xa.shape[-2:])
        pa = self.adapter(extract_pyramid(self.encoder, xa))
        pb = self.adapter(extract_pyramid(self.encoder, xb))
        semantic, da, db = self.semantic(pa, pb, hw)
        out = {"semantic": semantic, "difference": self.difference(pa, pb, hw)}
        if self.fusion is not None:
            out["fused"] = self.fusion(out["semantic"], out["difference"])
        if self.seg_head is not None:
            out["seg_a"], out["seg_b"] = seg_forward(da, db, self.seg_head, hw)
        return out


def build_model(cfg: Config, phase: str | None = None, encoder: EncoderHandle | None = None) -> SACDNet:
    phase = phase or cfg.train.phase
    if encoder is None:
        enc = cfg.encoder
        encoder = load_backbone(enc.weights_path, enc.variant, seed=enc.seed, taps=enc.taps)
    return SACDNet(encoder, phase, cfg.encoder.adapter_channels, cfg.decoder.base_channels,
                   cfg.decoder.attention_reduction, cfg.fusion.strategy, cfg.fusion.init,
                   cfg.train.seg_classes)
