"""The full two-branch network: backbone, CFE and OFS branches, LGR, decoders."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Backbone, BackboneDescriptor, Projection
from .cfe import CFE
from .core import BBNetError, Dims, ModelConfig, validate_dims
from .lgr import LGR, aggregate
from .ofs import OFS, OFSHead

CHECKPOINT_VERSION = 1


class CheckpointError(BBNetError):
    pass


@dataclass
class ForwardOutput:
    P: torch.Tensor
    P_OFS: torch.Tensor
    stages: dict[str, torch.Tensor] = field(default_factory=dict)


class Decoder(nn.Module):
    """``conv1x1((sigmoid(gate) * f') + f')`` where ``f'`` is a projected backbone level."""

    def __init__(self, in_channels, channels):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, channels, 1)
        self.fuse = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.proj.bias)
        nn.init.zeros_(self.fuse.bias)

    def forward(self, gate, feat):
        feat = self.proj(feat)
        if feat.shape[-2:] != gate.shape[-2:]:
            feat = F.interpolate(feat, size=gate.shape[-2:], mode="bilinear", align_corners=False)
        return self.fuse(torch.sigmoid(gate) * feat + feat)


class BBNet(nn.Module):
    def __init__(self, cfg: ModelConfig, pretrained_path: str | None = None):
        super().__init__()
        validate_dims(Dims(1, 3, cfg.input_size, cfg.input_size), cfg)
        self.cfg = cfg
        desc = BackboneDescriptor.named(cfg.backbone_id, pretrained_path)
        c = cfg.channels
        self.backbone = Backbone(desc)
        self.projection = Projection(desc.channels[2:], c)
        self.cfe = CFE(c, cfg.multiview_iters, cfg.group_consensus) if cfg.use_cfe else None
        self.ofs = OFS(c, cfg.learn_gamma) if cfg.use_ofs else None
        self.ofs_head = OFSHead(c)
        # per-image rescaling of f_ag: the product of two attenuated maps has a
        # scale that moves by orders of magnitude with C and the iteration count
        self.ag_norm = nn.GroupNorm(1, c)
        self.lgr = LGR(c, cfg.lgr_top_n) if cfg.use_lgr else None
        self.decoder4 = Decoder(desc.channels[3], c)
        self.decoder3 = Decoder(desc.channels[2], c)
        self.head = nn.Conv2d(c, 1, 1)
        nn.init.zeros_(self.head.bias)

    def forward(self, images: torch.Tensor, keep_stages: bool = False) -> ForwardOutput:
        validate_dims(Dims.of(images), self.cfg)
        size = images.shape[-2:]
        stages = {} if keep_stages else None
        pyr = self.backbone(images)
        f3p, f4p, f5p = self.projection(pyr)
        # a disabled module is replaced by an identity pass-through of f3p
        f_col = self.cfe(f3p, f4p, f5p, stages) if self.cfe is not None else f3p
        f_obj = self.ofs(f3p, stages) if self.ofs is not None else f3p
        f_ag = self.ag_norm(aggregate(f_col, f_obj))
        f_lgr = self.lgr(f_ag, stages) if self.lgr is not None else f_ag
        d4 = self.decoder4(f_lgr, pyr.f4)
        d3 = self.decoder3(d4, pyr.f3)
        logits = F.interpolate(self.head(d3), size=size, mode="bilinear", align_corners=False)
        p = torch.sigmoid(logits)
        p_ofs = self.ofs_head(f_obj, size)
        if stages is not None:
            stages.update(f_ag=f_ag, d4=d4, d3=d3)
            if self.lgr is None:
                stages["f_lgr"] = f_lgr
        return ForwardOutput(p, p_ofs, stages or {})


def forward(images: torch.Tensor, net: BBNet) -> ForwardOutput:
    return net(images)


def param_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def model_summary(net: BBNet, batch: int = 1) -> dict:
    """Exact learnable-scalar count and a 2*MAC FLOP estimate for one forward pass."""
    from torch.utils.flop_counter import FlopCounterMode

    s = net.cfg.input_size
    dtype = next(net.parameters()).dtype
    x = torch.zeros(batch, 3, s, s, dtype=dtype)
    counter = FlopCounterMode(display=False)
    with torch.no_grad(), counter:
        net(x)
    return {
        "param_count": param_count(net),
        "flop_estimate": int(counter.get_total_flops()),
        "input_size": s,
        "batch": batch,
    }


def state_hash(net: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(net: BBNet, path: str | Path, step: int | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(net.cfg),
        "step": step,
        "state_dict": {k: v.detach().cpu().clone() for k, v in net.state_dict().items()},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> BBNet:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises assorted types for corrupt archives
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')!r}")
    cfg = ModelConfig(**payload["config"])
    if expect is not None and expect != cfg:
        raise CheckpointError(f"{path}: checkpoint config {cfg} does not match {expect}")
    net = BBNet(cfg)
    try:
        net.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return net
