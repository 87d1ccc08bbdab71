"""Intra-image object feature search.

Dense affinity attention over one image's features, re-weighted per channel
by pooled statistics, refined by a 1x3/3x1 pair and added back through a
residual gate that starts closed (``gamma = 0``).
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class OFS(nn.Module):
    def __init__(self, channels, learn_gamma=True):
        super().__init__()
        self.query = nn.Conv2d(channels, channels, 3, padding=1)
        self.key = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv_1x3 = nn.Conv2d(channels, channels, (1, 3), padding=(0, 1))
        self.conv_3x1 = nn.Conv2d(channels, channels, (3, 1), padding=(1, 0))
        if learn_gamma:
            self.gamma = nn.Parameter(torch.zeros(1))
        else:
            # ablation: gate removed, residual always fully added
            self.register_buffer("gamma", torch.ones(1))

    def affinity(self, f_sin):
        """Return ``(A, context)``: the HW x HW affinity and its product with ``f_sin``."""
        b, c, h, w = f_sin.shape
        q = self.query(f_sin).reshape(b, c, h * w).transpose(1, 2)  # (B, HW, C)
        k = self.key(f_sin).reshape(b, c, h * w)  # (B, C, HW)
        a = torch.bmm(q, k)
        v = f_sin.reshape(b, c, h * w).transpose(1, 2)
        context = torch.bmm(a, v) / (h * w)
        return a, context.transpose(1, 2).reshape(b, c, h, w)

    def forward(self, f_sin, stages=None):
        _, context = self.affinity(f_sin)
        f_sum = F.max_pool2d(context, 3, 1, 1) + F.avg_pool2d(context, 3, 1, 1, count_include_pad=False)
        # GAP alone makes g * context cubic in f_sin; squashing g keeps it quadratic
        g = torch.sigmoid(f_sum.mean(dim=(2, 3), keepdim=True))
        f_w = self.conv_3x1(self.conv_1x3(g * context))
        f_obj = f_sin + self.gamma * f_w
        if stages is not None:
            stages.update(f_sin=f_sin, f_mm=context, f_sum=f_sum, f_w=f_w, f_obj=f_obj)
        return f_obj


class OFSHead(nn.Module):
    """1x1 conv to a single channel, bilinear upsample, sigmoid."""

    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, 1, 1)
        nn.init.zeros_(self.conv.bias)

    def forward(self, f_obj, size):
        logits = F.interpolate(self.conv(f_obj), size=size, mode="bilinear", align_corners=False)
        return torch.sigmoid(logits)
