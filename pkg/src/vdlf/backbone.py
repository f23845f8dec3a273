"""Convolutional feature extractor producing K pooled scale vectors."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError


@dataclass
class BackboneConfig:
    widths: tuple[int, ...] = (32, 64, 128, 256)
    pool_grids: tuple[tuple[int, int], ...] = ((2, 2), (1, 1))
    dim: int = 256
    in_channels: int = 3

    def __post_init__(self):
        if not self.pool_grids:
            raise ConfigError("at least one pooling grid is required")
        if self.dim < 1 or not self.widths:
            raise ConfigError("backbone needs dim >= 1 and at least one stage")

    @property
    def n_scales(self) -> int:
        return len(self.pool_grids)


@dataclass
class MultiScaleFeatures:
    scales: torch.Tensor  # B x K x d
    f_fused0: torch.Tensor  # B x d, mean over K

    @classmethod
    def from_scales(cls, scales: torch.Tensor) -> "MultiScaleFeatures":
        return cls(scales, scales.mean(dim=1))

    def __len__(self) -> int:
        return self.scales.shape[0]

    def select(self, idx) -> "MultiScaleFeatures":
        return MultiScaleFeatures(self.scales[idx], self.f_fused0[idx])


def _bounds(i: int, size: int, out: int) -> tuple[int, int]:
    return (i * size) // out, -(-((i + 1) * size) // out)


def adaptive_avg_pool(feature_map: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Average ``... x H x W`` over the standard adaptive partition into ``out_h x out_w`` cells.

    Cell ``(i, j)`` covers rows ``[floor(i*H/out_h), ceil((i+1)*H/out_h))`` and the
    analogous columns, so windows may overlap when H is not a multiple of out_h.
    """
    h, w = feature_map.shape[-2:]
    if out_h > h or out_w > w:
        raise ConfigError(f"cannot pool a {h}x{w} map to {out_h}x{out_w}")
    rows = []
    for i in range(out_h):
        r0, r1 = _bounds(i, h, out_h)
        cols = []
        for j in range(out_w):
            c0, c1 = _bounds(j, w, out_w)
            cols.append(feature_map[..., r0:r1, c0:c1].mean(dim=(-2, -1)))
        rows.append(torch.stack(cols, dim=-1))
    return torch.stack(rows, dim=-2)


def init_fan_in_uniform_(module: nn.Module, generator: torch.Generator | None = None) -> None:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases, unit/zero norm affine."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = math.sqrt(6.0 / fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class Backbone(nn.Module):
    """Stride-2 conv -> BatchNorm -> ReLU stages, then one pooled projection per grid."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        stages = []
        c_in = cfg.in_channels
        for width in cfg.widths:
            stages += [nn.Conv2d(c_in, width, 3, stride=2, padding=1),
                       nn.BatchNorm2d(width), nn.ReLU()]
            c_in = width
        self.stages = nn.Sequential(*stages)
        self.proj = nn.ModuleList(nn.Linear(c_in * gh * gw, cfg.dim) for gh, gw in cfg.pool_grids)

    def min_input_side(self) -> int:
        need = max(max(g) for g in self.cfg.pool_grids)
        for _ in self.cfg.widths:
            need = 2 * need - 1
        return need

    def feature_map(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(x)

    def forward(self, x: torch.Tensor) -> MultiScaleFeatures:
        return extract_multiscale(self, x)


def extract_multiscale(backbone: Backbone, x: torch.Tensor) -> MultiScaleFeatures:
    if x.shape[0] == 0:
        raise ConfigError("empty image batch")
    # Each stride-2 conv (k=3, pad=1) maps a side n to ceil(n / 2).
    h, w = x.shape[-2:]
    for _ in backbone.cfg.widths:
        h, w = (h + 1) // 2, (w + 1) // 2
    big_h = max(g[0] for g in backbone.cfg.pool_grids)
    big_w = max(g[1] for g in backbone.cfg.pool_grids)
    if h < big_h or w < big_w:
        raise ConfigError(
            f"final feature map is {h}x{w}, smaller than pooling grid {big_h}x{big_w}; "
            f"input side must be >= {backbone.min_input_side()}")
    fmap = backbone.feature_map(x)
    scales = [proj(adaptive_avg_pool(fmap, gh, gw).flatten(1))
              for proj, (gh, gw) in zip(backbone.proj, backbone.cfg.pool_grids)]
    return MultiScaleFeatures.from_scales(torch.stack(scales, dim=1))
