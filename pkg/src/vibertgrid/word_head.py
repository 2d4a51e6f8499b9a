"""Per-word features: ROIAlign pooling, late fusion with the word embedding, and the
two parallel linear classifiers trained with ENet-weighted cross entropy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


def roi_align(feature: torch.Tensor, boxes: torch.Tensor, stride: float, out_size: int = 7,
              sampling_ratio: int = 2) -> torch.Tensor:
    """Pool a fixed ``out_size`` grid per box from ``feature`` (C, H, W).

    ``boxes`` is (K, 4) in image pixels. Boxes are divided by ``stride`` without
    rounding and shifted by half a pixel so feature index i sits at coordinate
    i + 0.5; each bin averages ``sampling_ratio``^2 bilinear samples. Extents
    below one feature pixel are widened to one pixel about the box centre.
    Returns (K, C, out_size, out_size).
    """
    C, H, W = feature.shape
    K = boxes.shape[0]
    if K == 0:
        return feature.new_zeros((0, C, out_size, out_size))
    b = boxes.to(feature.dtype) / stride
    x1, y1, x2, y2 = b.unbind(1)
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    bw = torch.clamp(x2 - x1, min=1.0)
    bh = torch.clamp(y2 - y1, min=1.0)
    x1, y1 = cx - bw / 2 - 0.5, cy - bh / 2 - 0.5
    steps = (torch.arange(out_size * sampling_ratio, dtype=feature.dtype) + 0.5) / sampling_ratio
    xs = x1[:, None] + steps[None] * (bw / out_size)[:, None]
    ys = y1[:, None] + steps[None] * (bh / out_size)[:, None]
    ix, wx = _linear_taps(xs, W)
    iy, wy = _linear_taps(ys, H)
    vals = feature[:, iy[:, :, :, None, None], ix[:, None, None, :, :]]
    weights = wy[:, :, :, None, None] * wx[:, None, None, :, :]
    samples = (vals * weights).sum(dim=(3, 5))  # (C, K, Py, Px)
    P = out_size
    samples = samples.view(C, K, P, sampling_ratio, P, sampling_ratio).mean(dim=(3, 5))
    return samples.permute(1, 0, 2, 3)


def _linear_taps(coords: torch.Tensor, size: int):
    """Indices (…, 2) and weights (…, 2) of 1-D linear interpolation, zero outside [-1, size]."""
    valid = (coords >= -1.0) & (coords <= size)
    c = coords.clamp(min=0.0)
    low = c.floor().long()
    at_end = low >= size - 1
    low = torch.where(at_end, torch.full_like(low, size - 1), low)
    high = torch.where(at_end, low, low + 1)
    c = torch.where(at_end, low.to(c.dtype), c)
    frac = c - low.to(c.dtype)
    w = torch.stack([1.0 - frac, frac], dim=-1) * valid[..., None]
    return torch.stack([low, high], dim=-1), w


def enet_weights(priors, k: float = 1.02) -> np.ndarray:
    """Class weights ``1 / ln(k + p_c)``."""
    if k <= 1.0:
        raise ValueError("ENet constant k must exceed 1")
    p = np.asarray(priors, dtype=np.float64)
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("priors must lie in [0, 1]")
    return 1.0 / np.log(k + p)


def weighted_ce(logits: torch.Tensor, target: torch.Tensor, weights: torch.Tensor | None = None,
                mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over items of ``w[y] * CE``; the mean is over items, not over weights.

    With ``mask``, only masked items enter and the mean is over their count;
    an empty mask gives 0.
    """
    terms = -F.log_softmax(logits, dim=-1).gather(-1, target.clamp(min=0)[..., None])[..., 0]
    if weights is not None:
        terms = terms * weights[target.clamp(min=0)]
    if mask is None:
        return terms.mean()
    n = mask.sum()
    if n == 0:
        return terms.sum() * 0.0
    return (terms * mask).sum() / n


def dropout(x: torch.Tensor, p: float, training: bool, generator: torch.Generator | None):
    if not training or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


@dataclass
class WordHeadConfig:
    channels: int = 256   # P_fuse channels
    roi_size: int = 7
    sampling_ratio: int = 2
    hidden: int = 1024
    dropout: float = 0.1
    bias: bool = True
    binary_classifier: bool = True


class LateFusion(nn.Module):
    """x_hat = Dropout(FC_fuse([FC(Conv2(Conv1(X))) ; E]))."""

    def __init__(self, cfg: WordHeadConfig, dim: int):
        super().__init__()
        self.cfg = cfg
        c, r = cfg.channels, cfg.roi_size
        self.conv1 = nn.Conv2d(c, c, 3, 1, 1, bias=cfg.bias)
        self.conv2 = nn.Conv2d(c, c, 3, 1, 1, bias=cfg.bias)
        self.fc = nn.Linear(c * r * r, cfg.hidden, bias=cfg.bias)
        self.fuse = nn.Linear(cfg.hidden + dim, cfg.hidden, bias=cfg.bias)

    def forward(self, rois: torch.Tensor, word_emb: torch.Tensor, training: bool = False,
                generator: torch.Generator | None = None) -> torch.Tensor:
        if rois.shape[0] != word_emb.shape[0]:
            raise ValueError("need one ROI per word embedding")
        x = F.relu(self.conv1(rois))
        x = F.relu(self.conv2(x))
        x = F.relu(self.fc(x.flatten(1)))
        x = F.relu(self.fuse(torch.cat([x, word_emb], dim=1)))
        return dropout(x, self.cfg.dropout, training, generator)


class LinearHead(nn.Module):
    """Binary "is a field" classifier in parallel with the (C+1)-way classifier."""

    def __init__(self, hidden: int, num_tags: int, binary: bool = True, bias: bool = True):
        super().__init__()
        self.binary = nn.Linear(hidden, 2, bias=bias) if binary else None
        self.multi = nn.Linear(hidden, num_tags, bias=bias)

    def forward(self, x: torch.Tensor):
        o1 = self.binary(x) if self.binary is not None else None
        return o1, self.multi(x)


def linear_head_loss(o1, o2, labels: torch.Tensor, other: int, weights_multi=None,
                     weights_binary=None):
    """Returns (L_word1, L_word2, L_word). Binary target is 1 for field words."""
    if labels.numel() == 0:
        raise ValueError("word loss is undefined for an empty document")
    l2 = weighted_ce(o2, labels, weights_multi)
    if o1 is None:
        l1 = l2.new_zeros(())
    else:
        l1 = weighted_ce(o1, (labels != other).long(), weights_binary)
    return l1, l2, l1 + l2
