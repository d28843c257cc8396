"""Comparison encoders: plain matrix factorization and LightGCN propagation."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .graph import InteractionGraph
from .layers import _as_tensor, graph_tensors, item_aggregate, user_aggregate


@dataclass(frozen=True)
class BaselineConfig:
    kind: str = "lightgcn"  # "mf" or "lightgcn"
    layers: int = 3
    combine: str = "mean"  # "mean" over layers 0..L, or "last"

    def __post_init__(self):
        if self.kind not in ("mf", "lightgcn"):
            raise ValueError(f"unknown baseline {self.kind!r}")
        if self.combine not in ("mean", "last"):
            raise ValueError(f"unknown combine mode {self.combine!r}")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")
        if self.kind == "mf" and self.layers != 0:
            object.__setattr__(self, "layers", 0)


def lightgcn_layer(g: InteractionGraph, Z) -> torch.Tensor:
    """Symmetric-normalized neighbor sum; isolated nodes map to zero rows."""
    Z = _as_tensor(Z)
    t = graph_tensors(g)
    eu, ei = t["eu"], t["ei"]
    du, di = t["du"].to(Z.dtype), t["di"].to(Z.dtype)
    w = 1.0 / torch.sqrt(du[eu] * di[ei])
    Zu, Zi = Z[: g.n], Z[g.n :]
    new_u = user_aggregate(g, w, Zi)
    new_i = item_aggregate(g, w, Zu)
    return torch.cat([new_u, new_i])


def baseline_forward(g: InteractionGraph, Z0, cfg: BaselineConfig, *, return_layers: bool = False):
    Z = _as_tensor(Z0)
    layers = [Z]
    if cfg.kind == "lightgcn":
        for _ in range(cfg.layers):
            Z = lightgcn_layer(g, Z)
            layers.append(Z)
    out = torch.stack(layers).mean(0) if cfg.combine == "mean" else layers[-1]
    return (out, layers) if return_layers else out
