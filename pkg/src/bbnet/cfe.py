"""Inter-image collaborative feature exploration.

Concatenates the three high-level features, scrambles their spatial layout
with a perfect shuffle along rows and columns, then re-weights channels with
an iterated multi-scale softmax attention. An optional gate computed from the
group mean couples the images of one group.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import DimsError


def perfect_shuffle_index(n: int) -> np.ndarray:
    """Source index for every output position of the split-swap-flatten shuffle.

    Position ``b*2 + a`` of the output holds input ``a*(n/2) + b``.
    """
    if n % 2:
        raise DimsError(f"cannot shuffle an odd length {n}", divisor=2)
    half = n // 2
    return np.arange(n).reshape(2, half).T.reshape(-1)


@dataclass(frozen=True)
class ShufflePermutation:
    row_map: np.ndarray
    col_map: np.ndarray

    @classmethod
    def for_size(cls, h: int, w: int) -> "ShufflePermutation":
        return cls(perfect_shuffle_index(h), perfect_shuffle_index(w))

    @property
    def row_inverse(self) -> np.ndarray:
        return np.argsort(self.row_map)

    @property
    def col_inverse(self) -> np.ndarray:
        return np.argsort(self.col_map)


def shuffle_rows(x: torch.Tensor) -> torch.Tensor:
    b, c, h, w = x.shape
    if h % 2:
        raise DimsError(f"height {h} is odd", divisor=2)
    return x.reshape(b, c, 2, h // 2, w).transpose(2, 3).reshape(b, c, h, w)


def unshuffle_rows(x: torch.Tensor) -> torch.Tensor:
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w).transpose(2, 3).reshape(b, c, h, w)


def shuffle_cols(x: torch.Tensor) -> torch.Tensor:
    b, c, h, w = x.shape
    if w % 2:
        raise DimsError(f"width {w} is odd", divisor=2)
    return x.reshape(b, c, h, 2, w // 2).transpose(3, 4).reshape(b, c, h, w)


def unshuffle_cols(x: torch.Tensor) -> torch.Tensor:
    b, c, h, w = x.shape
    return x.reshape(b, c, h, w // 2, 2).transpose(3, 4).reshape(b, c, h, w)


def _conv1x1(cin, cout):
    conv = nn.Conv2d(cin, cout, 1)
    nn.init.zeros_(conv.bias)
    return conv


class ConcatLevels(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.reduce = _conv1x1(3 * channels, channels)

    def forward(self, f3, f4, f5):
        if not f3.shape[1] == f4.shape[1] == f5.shape[1]:
            raise DimsError("concat_levels expects equal channel counts")
        size = f3.shape[-2:]
        f4 = F.interpolate(f4, size=size, mode="bilinear", align_corners=False)
        f5 = F.interpolate(f5, size=size, mode="bilinear", align_corners=False)
        return self.reduce(torch.cat([f3, f4, f5], 1))


class FeatureShuffle(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.reduce = _conv1x1(2 * channels, channels)

    def branches(self, x):
        return shuffle_rows(x), shuffle_cols(x)

    def forward(self, x):
        return self.reduce(torch.cat(self.branches(x), 1))


class MultiView(nn.Module):
    """Channel-softmax attention from 0.5x, 2x and 4x views, applied ``iterations`` times.

    The same weights serve every iteration.
    """

    down_factor = 0.5
    up_factors = (2, 4)

    def __init__(self, channels, iterations=2):
        super().__init__()
        if iterations < 0:
            raise ValueError("iterations must be non-negative")
        self.iterations = iterations
        self.fuse = _conv1x1(3 * channels, channels)

    def views(self, x):
        size = x.shape[-2:]
        out = []
        for factor in (self.down_factor, *self.up_factors):
            v = F.interpolate(x, scale_factor=factor, mode="bilinear", align_corners=False)
            out.append(F.interpolate(v, size=size, mode="bilinear", align_corners=False))
        return out

    def weights(self, x):
        return torch.softmax(self.fuse(torch.cat(self.views(x), 1)), dim=1)

    def forward(self, x):
        for _ in range(self.iterations):
            x = x * self.weights(x)
        return x


def group_consensus(f: torch.Tensor) -> torch.Tensor:
    """Gate every image of the group by the sigmoid of the group-mean feature."""
    return f * torch.sigmoid(f.mean(dim=0, keepdim=True))


class CFE(nn.Module):
    def __init__(self, channels, iterations=2, consensus=True):
        super().__init__()
        self.concat = ConcatLevels(channels)
        self.shuffle = FeatureShuffle(channels)
        self.multi_view = MultiView(channels, iterations)
        self.consensus = consensus

    def forward(self, f3, f4, f5, stages=None):
        f_cat = self.concat(f3, f4, f5)
        f_sh = self.shuffle(f_cat)
        f_mv = self.multi_view(f_sh)
        f_col = group_consensus(f_mv) if self.consensus else f_mv
        if stages is not None:
            stages.update(f_cat=f_cat, f_sh=f_sh, f_mv=f_mv, f_col=f_col)
        return f_col
