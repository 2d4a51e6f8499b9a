"""
ROIAlign on a stride-4 feature map
==================================

Word boxes live in image pixels; ROIAlign divides them by the stride without
rounding and averages 2x2 bilinear samples per output bin. On a box that
covers an integer-aligned 7k x 7k region with k x k samples per bin, this is
plain average pooling.
"""
import numpy as np
import torch

from vibertgrid.word_head import roi_align

rng = np.random.default_rng(0)
feature = torch.tensor(rng.normal(size=(2, 20, 20)))
stride, k = 4, 2

box = torch.tensor([[3 * stride, 1 * stride, (3 + 7 * k) * stride, (1 + 7 * k) * stride]],
                   dtype=torch.float64)
pooled = roi_align(feature, box, stride, sampling_ratio=k)[0]
blocks = feature[:, 1:1 + 7 * k, 3:3 + 7 * k].reshape(2, 7, k, 7, k).mean((2, 4))
print("aligned box, max |roi - avgpool| =", float((pooled - blocks).abs().max()))

# a word only a couple of pixels tall still yields a full 7x7 map
thin = torch.tensor([[10.0, 30.0, 50.0, 31.5]], dtype=torch.float64)
print("thin box ->", tuple(roi_align(feature, thin, stride).shape))

# gradients flow back to the feature map, and only near the box
f = feature.clone().requires_grad_()
roi_align(f, box, stride).sum().backward()
rows = torch.nonzero(f.grad.abs().sum((0, 2))).flatten()
print("feature rows touched by the gradient:", rows.min().item(), "to", rows.max().item())
