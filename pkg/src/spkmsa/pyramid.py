"""Top-down feature pyramid with lateral connections.

The top stage map is reduced to the pyramid width by a 1x1 convolution;
walking down, each map is the 2x-upsampled map from above plus a 1x1
lateral projection of the corresponding bottom-up map. A 3x3 convolution
(with optional BN+ReLU) smooths each merged map against upsampling
aliasing. Upsampling is bilinear ('b') or a learned transposed convolution
('tc'); both variants produce identical shapes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import StageOutputs
from .nn import BatchNorm2d, Conv2d, ConvSpec, ConvTranspose2d, Module
from .tensor import ShapeError, Tensor


@dataclass
class FpmConfig:
    variant: str = "b"                  # 'b' bilinear | 'tc' transposed conv
    channels: int = 32                  # pyramid width = lowest-stage width
    stages: tuple = (2, 3, 4)           # backbone stage indices, contiguous, top included
    smooth_kernel: int = 3
    smooth_bn_relu: bool = True
    tc_kernel: int = 4                  # 2, 3 and 4 all double exactly

    def __post_init__(self):
        if self.variant not in ("b", "tc"):
            raise ValueError(f"unknown pyramid variant {self.variant!r}")
        st = tuple(sorted(self.stages))
        if st[-1] != 4:
            raise ShapeError("pyramid must include the top stage")
        if any(b - a != 1 for a, b in zip(st, st[1:])):
            raise ShapeError(f"pyramid stages must be contiguous, got {st}")
        self.stages = st


class FeaturePyramid(Module):
    """Produces P maps shape-matched to the given C maps at pyramid width."""

    def __init__(self, cfg: FpmConfig, stage_channels: tuple, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        st = cfg.stages
        # stage i consumes backbone map c(i+1) with stage_channels[i-1] channels
        self.top = Conv2d(ConvSpec(stage_channels[st[-1] - 1], ch, 1, 1, 0, bias=True), rng, dtype)
        self.laterals = [Conv2d(ConvSpec(stage_channels[s - 1], ch, 1, 1, 0, bias=True), rng, dtype)
                         for s in st[:-1]]
        k = cfg.smooth_kernel
        self.smoothers = [Conv2d(ConvSpec(ch, ch, k, 1, k // 2), rng, dtype) for _ in st]
        if cfg.smooth_bn_relu:
            self.smooth_bns = [BatchNorm2d(ch, dtype=dtype) for _ in st]
        else:
            self.smooth_bns = None
        if cfg.variant == "tc":
            self.upsamplers = [ConvTranspose2d.for_doubling(ch, ch, cfg.tc_kernel, rng, dtype)
                               for _ in st[:-1]]
        else:
            self.upsamplers = None

    def _upsample(self, x: Tensor, level: int) -> Tensor:
        if self.upsamplers is None:
            return T.bilinear_upsample(x)
        return self.upsamplers[level](x)

    def _smooth(self, x: Tensor, level: int) -> Tensor:
        out = self.smoothers[level](x)
        if self.smooth_bns is not None:
            out = self.smooth_bns[level](out).relu()
        return out

    def forward(self, maps: StageOutputs, disable_top_down: bool = False) -> dict:
        """Stage index -> P map. ``disable_top_down`` drops the merge term,
        reducing each output to smooth(lateral(c)); used by structural tests."""
        st = self.cfg.stages
        merged = {st[-1]: self.top(maps.by_stage(st[-1]))}
        for level in range(len(st) - 2, -1, -1):
            stage = st[level]
            lat = self.laterals[level](maps.by_stage(stage))
            if disable_top_down:
                merged[stage] = lat
                continue
            up = self._upsample(merged[st[level + 1]], level)
            if up.shape != lat.shape:
                raise ShapeError(
                    f"top-down map {up.shape} does not match lateral map {lat.shape} at stage {stage}")
            merged[stage] = up + lat
        return {s: self._smooth(merged[s], i) for i, s in enumerate(st)}


def fpm_param_count(module: FeaturePyramid) -> int:
    from .nn import count_params
    return count_params(module)
