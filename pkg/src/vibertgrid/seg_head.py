"""Auxiliary pixel classifiers over P_fuse: 3-way coarse and (C+1)-way fine."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .document import BACKGROUND, COARSE_BACKGROUND
from .word_head import weighted_ce


class SegHead(nn.Module):
    def __init__(self, channels: int, num_tags: int, bias: bool = True):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 1, bias=bias)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1, bias=bias)
        self.coarse = nn.Conv2d(channels, 3, 1, bias=bias)
        self.fine = nn.Conv2d(channels, num_tags, 1, bias=bias)
        self.channels = channels

    def forward(self, p_fuse: torch.Tensor):
        """``p_fuse`` (B, F, h, w) or (F, h, w) -> (coarse, fine) logits, same spatial size."""
        squeeze = p_fuse.dim() == 3
        x = p_fuse[None] if squeeze else p_fuse
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        x = F.relu(self.conv2(F.relu(self.conv1(x))))
        coarse, fine = self.coarse(x), self.fine(x)
        return (coarse[0], fine[0]) if squeeze else (coarse, fine)


def seg_loss(coarse: torch.Tensor, fine: torch.Tensor, coarse_mask: torch.Tensor,
             fine_mask: torch.Tensor, coarse_weights=None, fine_weights=None) -> torch.Tensor:
    """Weighted CE over all pixels (coarse) plus over in-box pixels only (fine).

    Logits are (K, h, w); masks are (h, w) long tensors using the
    :mod:`vibertgrid.document` conventions.
    """
    if coarse.shape[-2:] != coarse_mask.shape or fine.shape[-2:] != fine_mask.shape:
        raise ValueError("logits and masks are not spatially aligned")
    c = coarse.flatten(1).T
    f = fine.flatten(1).T
    cm, fm = coarse_mask.flatten(), fine_mask.flatten()
    l_coarse = weighted_ce(c, cm, coarse_weights)
    inside = (cm != COARSE_BACKGROUND) & (fm != BACKGROUND)
    l_fine = weighted_ce(f, fm, fine_weights, mask=inside.to(f.dtype))
    return l_coarse + l_fine
