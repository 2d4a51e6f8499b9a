"""BERTgrid construction, the residual FPN backbone, and early fusion into P_fuse."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .document import Document, grid_shape, owner_map


def build_bertgrid(word_embeddings: torch.Tensor, doc: Document, stride: int) -> torch.Tensor:
    """Scatter word embeddings onto the stride grid, shape (d, ceil(H/S), ceil(W/S)).

    Cell (x, y) takes the embedding of the last word (reading order) whose
    box contains the point (x*S, y*S); every other cell is zero.
    """
    return scatter_grid(word_embeddings, owner_map(doc, stride))


def scatter_grid(word_embeddings: torch.Tensor, owner: np.ndarray) -> torch.Tensor:
    d = word_embeddings.shape[1]
    table = torch.cat([word_embeddings, word_embeddings.new_zeros((1, d))])
    idx = torch.as_tensor(owner, dtype=torch.long)
    idx = torch.where(idx < 0, torch.full_like(idx, len(word_embeddings)), idx)
    return table[idx].permute(2, 0, 1)


@dataclass
class BackboneConfig:
    in_channels: int = 3
    widths: tuple = (32, 64, 128, 256)
    blocks: tuple = (2, 2, 2, 2)
    fpn_channels: int = 256
    fusion_stride: int = 4
    bias: bool = True
    groups: int = 8  # GroupNorm groups; 0 disables normalization


def _norm(channels: int, cfg: BackboneConfig) -> nn.Module:
    if not cfg.groups:
        return nn.Identity()
    return nn.GroupNorm(min(cfg.groups, channels), channels, affine=cfg.bias)


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int, cfg: BackboneConfig):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=cfg.bias)
        self.norm1 = _norm(cout, cfg)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=cfg.bias)
        self.norm2 = _norm(cout, cfg)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = nn.Conv2d(cin, cout, 1, stride, bias=cfg.bias)

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.relu(y + (x if self.down is None else self.down(x)))


class Backbone(nn.Module):
    """Four residual stages at strides 4, 8, 16, 32 plus a top-down FPN merge.

    ``text`` (optional) is added to the output of the stage whose stride equals
    ``cfg.fusion_stride``; everything downstream therefore sees the fused map.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, w[0], 3, 2, 1, bias=cfg.bias), _norm(w[0], cfg), nn.ReLU(),
            nn.Conv2d(w[0], w[0], 3, 2, 1, bias=cfg.bias), _norm(w[0], cfg), nn.ReLU())
        cin = w[0]
        for k, (cout, n) in enumerate(zip(w, cfg.blocks), start=1):
            blocks = OrderedDict()
            for j in range(n):
                blocks[f"block{j}"] = BasicBlock(cin, cout, 2 if (j == 0 and k > 1) else 1, cfg)
                cin = cout
            self.add_module(f"stage{k}", nn.Sequential(blocks))
        self.lateral = nn.ModuleList(nn.Conv2d(c, cfg.fpn_channels, 1, bias=cfg.bias) for c in w)
        self.smooth = nn.Conv2d(cfg.fpn_channels, cfg.fpn_channels, 3, 1, 1, bias=cfg.bias)

    @property
    def fusion_channels(self) -> int:
        return self.cfg.widths[{4: 0, 8: 1}[self.cfg.fusion_stride]]

    def forward(self, image: torch.Tensor, text: torch.Tensor | None = None):
        """``image`` (B, C, H, W) with H, W multiples of 32. Returns (levels, p2)."""
        if image.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} image channels, got {image.shape[1]}")
        x = self.stem(image)
        levels = []
        for k in range(1, 5):
            x = getattr(self, f"stage{k}")(x)
            if text is not None and 2 ** (k + 1) == self.cfg.fusion_stride:
                if text.shape[-2:] != x.shape[-2:]:
                    raise ValueError(f"grid {tuple(text.shape[-2:])} does not match "
                                     f"stride-{self.cfg.fusion_stride} map {tuple(x.shape[-2:])}")
                x = x + text
            levels.append(x)
        top = self.lateral[3](levels[3])
        for k in (2, 1, 0):
            top = self.lateral[k](levels[k]) + F.interpolate(top, size=levels[k].shape[-2:],
                                                            mode="nearest")
        return levels, self.smooth(top)


class EarlyFusion(nn.Module):
    """Grid (d channels) -> 1x1 bias-free projection -> added inside the backbone."""

    def __init__(self, dim: int, backbone: Backbone):
        super().__init__()
        if backbone.cfg.fusion_stride not in (4, 8):
            raise ValueError("fusion_stride must be 4 or 8")
        self.proj = nn.Conv2d(dim, backbone.fusion_channels, 1, bias=False)

    def forward(self, backbone: Backbone, image: torch.Tensor, grid: torch.Tensor | None):
        """``image`` (C, H, W), ``grid`` (d, ceil(H/S), ceil(W/S)) -> P_fuse (F, ceil(H/4), ceil(W/4))."""
        S = backbone.cfg.fusion_stride
        C, H, W = image.shape
        ph, pw = -H % 32, -W % 32
        x = image[None]
        if ph or pw:
            mode = "reflect" if (ph < H and pw < W) else "replicate"
            x = F.pad(x, (0, pw, 0, ph), mode=mode)
        text = None
        if grid is not None:
            gh, gw = grid_shape(H, W, S)
            if grid.shape[-2:] != (gh, gw):
                raise ValueError(f"grid shape {tuple(grid.shape[-2:])} is not stride-{S} of {H}x{W}")
            g = F.pad(grid[None], (0, (W + pw) // S - gw, 0, (H + ph) // S - gh))
            text = self.proj(g)
        _, p2 = backbone(x, text)
        h4, w4 = grid_shape(H, W, 4)
        return p2[0, :, :h4, :w4]
