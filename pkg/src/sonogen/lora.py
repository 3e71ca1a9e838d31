"""Low-rank adaptation of linear layers.

The update to a frozen d x k base weight is factorized as the product of a
d x r and an r x k matrix, merged with a scale `alpha`. Only the factors
receive gradients; base weights stay bit-identical through training.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import AlreadyMerged, BadRank, NotMerged, ShapeMismatch

__all__ = [
    "BaseLinear",
    "LoraAdapter",
    "init_adapter",
    "effective_weight",
    "lora_forward",
    "trainable_param_count",
    "merge",
    "unmerge",
    "save_adapter",
    "load_adapter",
    "LoraLinear",
    "attach_adapters",
    "zero_adapters",
]

TRAIN_ALPHA = 1.0
GENERATION_ALPHA = 0.9  # merge scale used when sampling from adapted models


@dataclass
class BaseLinear:
    """Frozen weight matrix W0 (d x k) with optional bias, plus a merge flag."""

    W0: torch.Tensor
    bias: torch.Tensor | None = None
    merged: bool = False

    def __post_init__(self):
        if self.W0.ndim != 2:
            raise ShapeMismatch(f"W0 must be 2-D, got shape {tuple(self.W0.shape)}")
        if not torch.isfinite(self.W0).all():
            raise ValueError("W0 contains non-finite entries")
        if self.bias is not None and self.bias.shape != (self.W0.shape[1],):
            raise ShapeMismatch(
                f"bias shape {tuple(self.bias.shape)} incompatible with k={self.W0.shape[1]}")
        self.W0 = self.W0.detach().clone()
        self.W0.requires_grad_(False)

    @property
    def d(self) -> int:
        return self.W0.shape[0]

    @property
    def k(self) -> int:
        return self.W0.shape[1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = x @ self.W0
        if self.bias is not None:
            out = out + self.bias
        return out


@dataclass
class LoraAdapter:
    A: torch.Tensor  # d x r
    B: torch.Tensor  # r x k
    r: int
    alpha: float = TRAIN_ALPHA
    seed: int = 0

    def delta(self) -> torch.Tensor:
        return self.A @ self.B

    def parameters(self):
        return [self.A, self.B]


def init_adapter(d: int, k: int, r: int, seed: int = 0, alpha: float = TRAIN_ALPHA,
                 ) -> LoraAdapter:
    """Seeded Gaussian first factor (std 1/r), zero second factor.

    The zero factor guarantees the adapted model starts exactly at the base
    model. Ranks at or above min(d, k) are allowed but pointless, so they
    only warn.
    """
    if r < 1:
        raise BadRank(f"rank must be >= 1, got {r}")
    if d < 1 or k < 1:
        raise ShapeMismatch(f"dimensions must be >= 1, got d={d}, k={k}")
    if r >= min(d, k):
        warnings.warn(f"rank {r} >= min(d, k) = {min(d, k)}: no compression", stacklevel=2)
    gen = torch.Generator().manual_seed(seed)
    A = torch.empty(d, r, dtype=torch.float32)
    A.normal_(mean=0.0, std=1.0 / r, generator=gen)
    B = torch.zeros(r, k, dtype=torch.float32)
    A.requires_grad_(True)
    B.requires_grad_(True)
    return LoraAdapter(A=A, B=B, r=r, alpha=alpha, seed=seed)


def _check_shapes(base: BaseLinear, adapter: LoraAdapter):
    if adapter.A.shape != (base.d, adapter.r) or adapter.B.shape != (adapter.r, base.k):
        raise ShapeMismatch(
            f"adapter ({tuple(adapter.A.shape)}, {tuple(adapter.B.shape)}) does not fit "
            f"base {base.d}x{base.k}")


def effective_weight(base: BaseLinear, adapter: LoraAdapter) -> torch.Tensor:
    _check_shapes(base, adapter)
    return base.W0 + adapter.alpha * adapter.delta()


def lora_forward(x: torch.Tensor, base: BaseLinear, adapter: LoraAdapter) -> torch.Tensor:
    """Factored forward pass: base output plus alpha * (x A) B."""
    _check_shapes(base, adapter)
    if x.shape[-1] != base.d:
        raise ShapeMismatch(f"input width {x.shape[-1]} != d={base.d}")
    out = x @ base.W0 + adapter.alpha * ((x @ adapter.A) @ adapter.B)
    if base.bias is not None:
        out = out + base.bias
    return out


def trainable_param_count(adapter: LoraAdapter) -> int:
    d = adapter.A.shape[0]
    k = adapter.B.shape[1]
    return adapter.r * (d + k)


def merge(base: BaseLinear, adapter: LoraAdapter) -> BaseLinear:
    """Fold the adapter into the weights for adapter-free inference."""
    if base.merged:
        raise AlreadyMerged("base already carries a merged adapter")
    _check_shapes(base, adapter)
    merged = BaseLinear(W0=base.W0 + adapter.alpha * adapter.delta().detach(),
                        bias=base.bias)
    merged.merged = True
    return merged


def unmerge(merged_base: BaseLinear, adapter: LoraAdapter) -> BaseLinear:
    if not merged_base.merged:
        raise NotMerged("base has no merged adapter to remove")
    _check_shapes(merged_base, adapter)
    return BaseLinear(W0=merged_base.W0 - adapter.alpha * adapter.delta().detach(),
                      bias=merged_base.bias)


# -- adapter checkpoint files ---------------------------------------------------
# npz container: arrays A (d x r), B (r x k); scalars r, alpha, seed.


def save_adapter(adapter: LoraAdapter, path: str | Path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savez(path,
             A=adapter.A.detach().numpy(),
             B=adapter.B.detach().numpy(),
             r=np.int64(adapter.r),
             alpha=np.float64(adapter.alpha),
             seed=np.int64(adapter.seed))


def load_adapter(path: str | Path) -> LoraAdapter:
    with np.load(path) as z:
        A = torch.from_numpy(z["A"]).clone().requires_grad_(True)
        B = torch.from_numpy(z["B"]).clone().requires_grad_(True)
        return LoraAdapter(A=A, B=B, r=int(z["r"]), alpha=float(z["alpha"]),
                           seed=int(z["seed"]))


# -- torch module integration ------------------------------------------------------


class LoraLinear(nn.Module):
    """Wraps an nn.Linear: frozen base plus trainable low-rank delta.

    With the second factor at zero the delta is exactly zero, so the wrapped
    layer is bit-identical to the base layer.
    """

    def __init__(self, base: nn.Linear, r: int, seed: int = 0, alpha: float = TRAIN_ALPHA):
        super().__init__()
        if r < 1:
            raise BadRank(f"rank must be >= 1, got {r}")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        d = base.in_features
        k = base.out_features
        gen = torch.Generator().manual_seed(seed)
        A = torch.empty(d, r, dtype=base.weight.dtype)
        A.normal_(mean=0.0, std=1.0 / r, generator=gen)
        self.lora_A = nn.Parameter(A)
        self.lora_B = nn.Parameter(torch.zeros(r, k, dtype=base.weight.dtype))
        self.r = r
        self.alpha = alpha

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.alpha * ((x @ self.lora_A) @ self.lora_B)


def attach_adapters(model: nn.Module, target_names: list[str], r: int, seed: int,
                    alpha: float = TRAIN_ALPHA) -> list[str]:
    """Replace the named nn.Linear submodules with LoraLinear wrappers and
    freeze every other parameter. Returns the wrapped module names."""
    for p in model.parameters():
        p.requires_grad_(False)
    wrapped = []
    for i, name in enumerate(target_names):
        parent = model
        parts = name.split(".")
        for part in parts[:-1]:
            parent = getattr(parent, part)
        layer = getattr(parent, parts[-1])
        if not isinstance(layer, nn.Linear):
            raise ShapeMismatch(f"{name} is not a Linear layer")
        setattr(parent, parts[-1], LoraLinear(layer, r=r, seed=seed + i, alpha=alpha))
        wrapped.append(name)
    return wrapped


def zero_adapters(model: nn.Module):
    """Zero every low-rank delta in place (adapted forward == base forward)."""
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, LoraLinear):
                module.lora_B.zero_()
