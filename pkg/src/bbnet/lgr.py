"""Local-global refinement of the aggregated two-branch feature."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import DimsError, ShapeError

GRID = 3


def aggregate(f_col: torch.Tensor, f_obj: torch.Tensor) -> torch.Tensor:
    if f_col.shape != f_obj.shape:
        raise ShapeError(f"cannot aggregate {tuple(f_col.shape)} with {tuple(f_obj.shape)}")
    return f_col * f_obj


@dataclass
class BlockGrid:
    blocks: torch.Tensor  # (B, 9, C, H/3, W/3), row-major block order
    probs: torch.Tensor  # (B, 9)


def split_blocks(x: torch.Tensor, grid: int = GRID) -> BlockGrid:
    b, c, h, w = x.shape
    for name, n in (("height", h), ("width", w)):
        if n % grid:
            raise DimsError(f"{name} {n} is not divisible by {grid}", divisor=grid)
    bh, bw = h // grid, w // grid
    blocks = x.reshape(b, c, grid, bh, grid, bw).permute(0, 2, 4, 1, 3, 5)
    blocks = blocks.reshape(b, grid * grid, c, bh, bw)
    probs = torch.sigmoid(blocks).mean(dim=(2, 3, 4))
    return BlockGrid(blocks, probs)


def select_blocks(grid: BlockGrid, top_n: int = 1) -> tuple[torch.Tensor, torch.Tensor]:
    """Average of the ``top_n`` most probable blocks; ties go to the earlier block.

    Returns ``(selected, indices)`` with indices of shape (B, top_n).
    """
    n_blocks = grid.probs.shape[1]
    if not 1 <= top_n <= n_blocks:
        raise ValueError(f"top_n must lie in [1, {n_blocks}], got {top_n}")
    order = torch.sort(grid.probs.detach(), dim=1, descending=True, stable=True).indices
    idx = order[:, :top_n]
    gather = idx[:, :, None, None, None].expand(-1, -1, *grid.blocks.shape[2:])
    selected = torch.gather(grid.blocks, 1, gather).mean(dim=1)
    return selected, idx


def _strip_pair(channels):
    return nn.Sequential(
        nn.Conv2d(channels, channels, (1, 3), padding=(0, 1)),
        nn.Conv2d(channels, channels, (3, 1), padding=(1, 0)),
    )


def _zero_biases(module):
    for m in module.modules():
        if isinstance(m, nn.Conv2d) and m.bias is not None:
            nn.init.zeros_(m.bias)


class LGR(nn.Module):
    def __init__(self, channels, top_n=1):
        super().__init__()
        self.top_n = top_n
        self.local = _strip_pair(channels)
        self.global_ = _strip_pair(channels)
        self.fuse_conv = nn.Conv2d(2 * channels, channels, 3, padding=1)
        _zero_biases(self)

    def local_refine(self, f_ag, top_n=None):
        selected, _ = select_blocks(split_blocks(f_ag), top_n or self.top_n)
        return self.local(selected)

    def global_refine(self, f_ag):
        return self.global_(f_ag)

    def fuse(self, f_local, f_global):
        h, w = f_global.shape[-2:]
        if f_local.shape[-2] * GRID != h or f_local.shape[-1] * GRID != w:
            raise ShapeError(
                f"local map {tuple(f_local.shape)} is not a third of global map {tuple(f_global.shape)}"
            )
        up = F.interpolate(f_local, scale_factor=GRID, mode="bilinear", align_corners=False)
        return self.fuse_conv(torch.cat([up, f_global], 1))

    def forward(self, f_ag, stages=None):
        f_local = self.local_refine(f_ag)
        f_global = self.global_refine(f_ag)
        f_lgr = self.fuse(f_local, f_global)
        if stages is not None:
            stages.update(f_local=f_local, f_global=f_global, f_lgr=f_lgr)
        return f_lgr
