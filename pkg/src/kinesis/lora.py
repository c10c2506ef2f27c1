"""Low-rank adapters: wrap a frozen Linear with trainable A/B matrices."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn


class LoraError(ValueError):
    pass


@dataclass(frozen=True)
class LoraConfig:
    """Adapter shape: rank, scaling, and which projections to wrap."""

    rank: int = 32
    alpha: float | None = None  # defaults to 2 * rank
    targets: tuple[str, ...] = ("q_proj", "v_proj")

    def __post_init__(self):
        if self.rank < 1:
            raise LoraError(f"rank must be >= 1, got {self.rank}")
        if not self.targets:
            raise LoraError("at least one target projection is required")

    @property
    def scaling(self) -> float:
        alpha = self.alpha if self.alpha is not None else 2.0 * self.rank
        return alpha / self.rank


class LoraLinear(nn.Module):
    """base(x) + (alpha/r) * B A x, with base weights frozen.

    A gets a small kaiming init, B starts at zero, so a freshly wrapped layer
    computes exactly what the base layer did.
    """

    def __init__(self, base: nn.Linear, cfg: LoraConfig):
        super().__init__()
        if cfg.rank > min(base.in_features, base.out_features):
            raise LoraError(
                f"rank {cfg.rank} exceeds projection dimension "
                f"{base.in_features}x{base.out_features}"
            )
        self.base = base
        self.base.weight.requires_grad_(False)
        if self.base.bias is not None:
            self.base.bias.requires_grad_(False)
        self.scaling = cfg.scaling
        self.lora_a = nn.Parameter(torch.zeros(cfg.rank, base.in_features))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, cfg.rank))
        nn.init.kaiming_uniform_(self.lora_a, a=math.sqrt(5))

    def forward(self, x):
        update = nn.functional.linear(nn.functional.linear(x, self.lora_a), self.lora_b)
        return self.base(x) + self.scaling * update

    def merged_linear(self) -> nn.Linear:
        """Fold the adapter into a fresh plain Linear."""
        out = nn.Linear(self.base.in_features, self.base.out_features,
                        bias=self.base.bias is not None)
        with torch.no_grad():
            out.weight.copy_(self.base.weight + self.scaling * (self.lora_b @ self.lora_a))
            if self.base.bias is not None:
                out.bias.copy_(self.base.bias)
        return out

    def trainable_parameter_count(self) -> int:
        return self.lora_a.numel() + self.lora_b.numel()
