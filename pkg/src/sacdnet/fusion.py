"""Combining the semantic and difference change maps into the final map."""
from __future__ import annotations

import torch
from torch import nn

from .errors import ConfigError, StructuralError

STRATEGIES = ("learnable", "max", "mean")


class Fusion(nn.Module):
    """``sigmoid(w) * semantic + (1 - sigmoid(w)) * difference`` with a scalar ``w``.

    ``max`` and ``mean`` are the fixed alternatives; they still hold ``w`` so
    checkpoints have one layout, but it never enters the graph.
    """

    def __init__(self, strategy: str = "learnable", init: float = 0.0):
        super().__init__()
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown fusion strategy '{strategy}', expected one of {STRATEGIES}")
        self.strategy = strategy
        self.omega = nn.Parameter(torch.tensor(float(init)), requires_grad=strategy == "learnable")

    @property
    def weight(self) -> torch.Tensor:
        return torch.sigmoid(self.omega)

    def forward(self, semantic: torch.Tensor, difference: torch.Tensor) -> torch.Tensor:
        if semantic.shape != difference.shape:
            raise StructuralError(f"cannot fuse maps of shape {tuple(semantic.shape)} "
                                  f"and {tuple(difference.shape)}")
        if self.strategy == "max":
            return torch.maximum(semantic, difference)
        if self.strategy == "mean":
            return 0.5 * (semantic + difference)
        w = self.weight.to(semantic.dtype)
        return w * semantic + (1 - w) * difference

    def extra_repr(self) -> str:
        return f"strategy={self.strategy}"


def fuse(semantic: torch.Tensor, difference: torch.Tensor, params: Fusion) -> torch.Tensor:
    return params(semantic, difference)
