"""ResNet-34 style feature extractor exposing per-stage maps.

The stem is a 7x7, stride-1 convolution; four stages of basic residual
blocks follow with [3, 4, 6, 3] blocks and [32, 64, 128, 256] channels.
Stage 1 keeps resolution, stages 2-4 halve both axes, so a 64 x T input
yields maps of (64,T,32), (32,T/2,64), (16,T/4,128) and (8,T/8,256). The
output of stage i is exposed as c(i+1), matching the conv-layer naming.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .nn import BatchNorm2d, Conv2d, ConvSpec, Module
from .tensor import ShapeError, Tensor


@dataclass
class BackboneConfig:
    stage_blocks: tuple = (3, 4, 6, 3)
    stage_channels: tuple = (32, 64, 128, 256)
    stage_strides: tuple = (1, 2, 2, 2)
    conv1_kernel: int = 7
    conv1_stride: int = 1
    in_channels: int = 1
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if len(self.stage_blocks) != 4 or len(self.stage_channels) != 4:
            raise ShapeError("backbone needs exactly four stages")
        if any(b < 1 for b in self.stage_blocks):
            raise ShapeError("each stage needs at least one block")


@dataclass
class StageOutputs:
    """Feature maps c2..c5 taken from the last layer of each stage."""

    c2: Tensor
    c3: Tensor
    c4: Tensor
    c5: Tensor

    def by_stage(self, stage: int) -> Tensor:
        # Stage i (1-based) produced map c(i+1).
        return (self.c2, self.c3, self.c4, self.c5)[stage - 1]


class BasicBlock(Module):
    """Two 3x3 convolutions with identity or 1x1-projection shortcut."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, rng, cfg: BackboneConfig, dtype):
        super().__init__()
        self.conv1 = Conv2d(ConvSpec(in_ch, out_ch, 3, stride, 1), rng, dtype)
        self.bn1 = BatchNorm2d(out_ch, cfg.bn_eps, cfg.bn_momentum, dtype)
        self.conv2 = Conv2d(ConvSpec(out_ch, out_ch, 3, 1, 1), rng, dtype)
        self.bn2 = BatchNorm2d(out_ch, cfg.bn_eps, cfg.bn_momentum, dtype)
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv2d(ConvSpec(in_ch, out_ch, 1, stride, 0), rng, dtype)
            self.proj_bn = BatchNorm2d(out_ch, cfg.bn_eps, cfg.bn_momentum, dtype)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x: Tensor) -> Tensor:
        out = self.bn1(self.conv1(x)).relu()
        out = self.bn2(self.conv2(out))
        skip = x if self.proj is None else self.proj_bn(self.proj(x))
        return (out + skip).relu()


def pad_time_to_multiple(x: Tensor, multiple: int = 8) -> Tensor:
    """Reflect-pad the time axis on the right up to the next multiple."""
    t = x.data.shape[3]
    if t < multiple:
        raise ShapeError(f"time extent {t} below minimum {multiple}")
    rem = t % multiple
    if rem == 0:
        return x
    pad = multiple - rem
    # Reflection without repeating the edge column needs t > pad.
    tail = x[:, :, :, t - pad - 1:t - 1]
    return T.concat([x, tail[:, :, :, ::-1]], axis=3)


class ResNetExtractor(Module):
    """Bottom-up pathway; ``forward_stages`` returns all four stage maps."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        k = cfg.conv1_kernel
        self.conv1 = Conv2d(ConvSpec(cfg.in_channels, cfg.stage_channels[0], k,
                                     cfg.conv1_stride, k // 2), rng, dtype)
        self.bn1 = BatchNorm2d(cfg.stage_channels[0], cfg.bn_eps, cfg.bn_momentum, dtype)
        stages = []
        in_ch = cfg.stage_channels[0]
        for blocks, out_ch, stride in zip(cfg.stage_blocks, cfg.stage_channels, cfg.stage_strides):
            blocks_list = [BasicBlock(in_ch, out_ch, stride, rng, cfg, dtype)]
            for _ in range(blocks - 1):
                blocks_list.append(BasicBlock(out_ch, out_ch, 1, rng, cfg, dtype))
            stages.append(nn.ModuleList(blocks_list))
            in_ch = out_ch
        self.stage1, self.stage2, self.stage3, self.stage4 = stages

    def forward_stages(self, x: Tensor) -> StageOutputs:
        if x.data.ndim != 4 or x.data.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected [B, {self.cfg.in_channels}, F, T] input, got {x.data.shape}")
        x = pad_time_to_multiple(x, 8)
        h = self.bn1(self.conv1(x)).relu()
        maps = []
        for stage in (self.stage1, self.stage2, self.stage3, self.stage4):
            for block in stage:
                h = block(h)
            maps.append(h)
        return StageOutputs(*maps)

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_stages(x).c5


def build_backbone(cfg: BackboneConfig, seed: int, dtype=np.float32) -> ResNetExtractor:
    """Deterministic construction: same seed, bit-identical weights."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    return ResNetExtractor(cfg, rng, dtype)
