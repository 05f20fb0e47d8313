"""Dual-stream decoder: semantic-aware branch and dense difference-aware branch.

Scale indices below are 1-based over the adapted pyramid, scale 1 being the
stride-4 level and scale 4 the stride-32 level.
"""
from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import NumericError, StructuralError

NUM_SCALES = 4
DEPTH = 4


def conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1, bias=False),
                         nn.BatchNorm2d(cout),
                         nn.ReLU(inplace=True))


def double_conv(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(conv_block(cin, cout), conv_block(cout, cout))


def up(cin: int, cout: int) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(cin, cout, 2, stride=2)


def check_pair(f1: Sequence[torch.Tensor], f2: Sequence[torch.Tensor]) -> None:
    if len(f1) != NUM_SCALES or len(f2) != NUM_SCALES:
        raise StructuralError(f"expected {NUM_SCALES} pyramid levels, got {len(f1)} and {len(f2)}")
    for i, (a, b) in enumerate(zip(f1, f2)):
        if a.shape != b.shape:
            raise StructuralError(f"level {i}: pre-change shape {tuple(a.shape)} "
                                  f"!= post-change shape {tuple(b.shape)}")


class ChangeHead(nn.Module):
    """conv+BN+ReLU, a 1-channel conv producing logits, sigmoid, bilinear resize."""

    def __init__(self, cin: int, mid: int):
        super().__init__()
        self.block = conv_block(cin, mid)
        self.logit = nn.Conv2d(mid, 1, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise NumericError("change head received non-finite features")
        return self.logit(self.block(x))

    def forward(self, x: torch.Tensor, out_hw: tuple[int, int]) -> torch.Tensor:
        probs = torch.sigmoid(self.logits(x))
        if tuple(probs.shape[-2:]) != tuple(out_hw):
            probs = F.interpolate(probs, size=out_hw, mode="bilinear", align_corners=False)
        return probs[:, 0]


def change_head(head: ChangeHead, features: torch.Tensor, out_hw: tuple[int, int]) -> torch.Tensor:
    return head(features, out_hw)


class ChannelAttention(nn.Module):
    """Squeeze-excitation gate: GAP -> bottleneck -> sigmoid -> per-channel scale."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc = nn.Sequential(nn.Conv2d(channels, hidden, 1),
                                nn.ReLU(inplace=True),
                                nn.Conv2d(hidden, channels, 1))

    def weights(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc(F.adaptive_avg_pool2d(x, 1)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.weights(x)


def channel_attention(cam: ChannelAttention, stack: torch.Tensor) -> torch.Tensor:
    return cam(stack)


class SemanticDecoder(nn.Module):
    """Decodes each temporal pyramid with one shared set of three units.

    The coarsest level seeds the recursion; each unit upsamples the previous
    output by deconvolution, concatenates the same-scale feature and applies two
    conv blocks.  The finest outputs of both streams are concatenated late and
    passed to the change head.
    """

    def __init__(self, in_channels: int, channels: int):
        super().__init__()
        self.channels = channels
        self.ups = nn.ModuleList()
        self.units = nn.ModuleList()
        cin = in_channels
        for _ in range(NUM_SCALES - 1):
            self.ups.append(up(cin, channels))
            self.units.append(double_conv(in_channels + channels, channels))
            cin = channels
        self.head = ChangeHead(2 * channels, channels)

    def decode(self, feats: Sequence[torch.Tensor]) -> torch.Tensor:
        d = feats[-1]
        # units are ordered coarse -> fine
        for k, (upsample, unit) in enumerate(zip(self.ups, self.units)):
            f = feats[NUM_SCALES - 2 - k]
            d = unit(torch.cat([f, upsample(d)], dim=1))
        return d

    def forward(self, f1: Sequence[torch.Tensor], f2: Sequence[torch.Tensor],
                out_hw: tuple[int, int] | None = None):
        check_pair(f1, f2)
        d1 = self.decode(f1)
        d2 = self.decode(f2)
        if out_hw is None:
            out_hw = (d1.shape[-2] * 4, d1.shape[-1] * 4)
        probs = self.head(torch.cat([d1, d2], dim=1), out_hw)
        return probs, d1, d2


def semantic_decode(decoder: SemanticDecoder, f1, f2, out_hw=None):
    return decoder(f1, f2, out_hw)


def dense_graph(num_scales: int = NUM_SCALES) -> dict[tuple[int, int], tuple[tuple, ...]]:
    """Input keys of every (scale, depth) unit of the nested grid.

    Keys: ``("F", i)`` / ``("F'", i)`` same-scale features, ``("R", i, k)`` earlier
    units on the same scale, ``("Up", "R", i+1, j-1)`` the deconvolved unit one
    scale coarser, and ``("Up", "F", i+1)`` the deconvolved concatenated pair one
    scale coarser (only for depth 1).
    """
    graph = {}
    for j in range(1, num_scales + 1):
        for i in range(1, num_scales + 2 - j):
            keys: list[tuple] = [("F", i), ("F'", i)]
            keys += [("R", i, k) for k in range(1, j)]
            if i < num_scales:
                keys.append(("Up", "R", i + 1, j - 1) if j > 1 else ("Up", "F", i + 1))
            graph[(i, j)] = tuple(keys)
    return graph


class DifferenceDecoder(nn.Module):
    """UNet++-style dense grid over the concatenated bi-temporal pyramid.

    All depths of the finest scale are concatenated, gated by channel attention
    and fed to the change head.
    """

    def __init__(self, in_channels: int, channels: int, reduction: int = 4):
        super().__init__()
        self.channels = channels
        self.graph = dense_graph()
        self.units = nn.ModuleDict()
        self.ups = nn.ModuleDict()
        for (i, j), keys in self.graph.items():
            cin = 0
            for key in keys:
                if key[0] in ("F", "F'"):
                    cin += in_channels
                elif key[0] == "R":
                    cin += channels
                else:
                    src = 2 * in_channels if key[1] == "F" else channels
                    self.ups[_name(i, j)] = up(src, channels)
                    cin += channels
            self.units[_name(i, j)] = double_conv(cin, channels)
        self.cam = ChannelAttention(DEPTH * channels, reduction)
        self.head = ChangeHead(DEPTH * channels, channels)

    def grid(self, f1: Sequence[torch.Tensor], f2: Sequence[torch.Tensor]) -> dict[tuple[int, int], torch.Tensor]:
        check_pair(f1, f2)
        state: dict[tuple[int, int], torch.Tensor] = {}
        for (i, j), keys in self.graph.items():
            inputs = []
            for key in keys:
                if key[0] == "F":
                    inputs.append(f1[i - 1])
                elif key[0] == "F'":
                    inputs.append(f2[i - 1])
                elif key[0] == "R":
                    inputs.append(state[(key[1], key[2])])
                elif key[1] == "R":
                    inputs.append(self.ups[_name(i, j)](state[(key[2], key[3])]))
                else:
                    s = key[2] - 1
                    inputs.append(self.ups[_name(i, j)](torch.cat([f1[s], f2[s]], dim=1)))
            state[(i, j)] = self.units[_name(i, j)](torch.cat(inputs, dim=1))
        return state

    def forward(self, f1, f2, out_hw: tuple[int, int] | None = None, return_grid: bool = False):
        state = self.grid(f1, f2)
        stack = torch.cat([state[(1, j)] for j in range(1, DEPTH + 1)], dim=1)
        if out_hw is None:
            out_hw = (stack.shape[-2] * 4, stack.shape[-1] * 4)
        probs = self.head(self.cam(stack), out_hw)
        if return_grid:
            return probs, state
        return probs


def _name(i: int, j: int) -> str:
    return f"r{i}_{j}"


def difference_decode(decoder: DifferenceDecoder, f1, f2, out_hw=None):
    return decoder(f1, f2, out_hw)
