"""Embedding heads over single-scale and multi-scale feature maps.

Three head shapes:

* single: pool the top map, one FC to the embedding width.
* msfa: resample the three stage maps to the middle resolution (learned
  stride-2 conv down, x2 up), concatenate channels, pool once, FC. The top
  map's upsampler is bilinear in pyramid systems; the plain multi-scale
  baseline uses a learned transposed convolution, which is where its extra
  parameters live.
* msea: per-stage 1x1 conv, per-stage pooling, concatenate the pooled
  vectors, FC. The dictionary encoder and its FC are one instance shared
  by all stages; attentive pooling keeps per-stage parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, ResNetExtractor
from .config import RunConfig
from .frontend import AcousticFeatures, compute_vad_mask, energy_vad_trim, mean_normalize_sliding
from .nn import BatchNorm2d, Conv2d, ConvSpec, ConvTranspose2d, Linear, Module
from .pooling import DictionaryEncoder, GlobalAveragePool, SelfAttentivePool, StatisticsPool
from .pyramid import FeaturePyramid, FpmConfig
from .tensor import ShapeError, Tensor


@dataclass
class SpeakerEmbedding:
    vector: np.ndarray
    utterance_id: str = ""

    def __post_init__(self):
        self.vector = np.asarray(self.vector).reshape(-1)
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("embedding contains non-finite values")
        if np.linalg.norm(self.vector) == 0.0:
            raise ValueError("embedding has zero norm")


def _make_pooling(kind: str, channels: int, cfg: RunConfig, rng, dtype):
    if kind == "gap":
        return GlobalAveragePool()
    if kind == "stats":
        return StatisticsPool()
    if kind == "sap":
        return SelfAttentivePool(channels, rng, cfg.sap_hidden or None, dtype)
    if kind == "lde":
        return DictionaryEncoder(cfg.lde_channels, cfg.lde_codewords, cfg.embedding_dim, rng, dtype)
    raise ValueError(f"unknown pooling {kind!r}")


def _pooled_dim(kind: str, channels: int, cfg: RunConfig) -> int:
    return {"gap": channels, "stats": 2 * channels, "sap": channels,
            "lde": cfg.embedding_dim}[kind]


class SingleScaleHead(Module):
    def __init__(self, in_channels: int, cfg: RunConfig, rng, dtype):
        super().__init__()
        channels = in_channels
        if cfg.pooling == "lde":
            self.pre = Conv2d(ConvSpec(in_channels, cfg.lde_channels, 1, bias=True), rng, dtype)
            channels = cfg.lde_channels
        else:
            self.pre = None
        self.pool = _make_pooling(cfg.pooling, channels, cfg, rng, dtype)
        self.fc = Linear(_pooled_dim(cfg.pooling, channels, cfg), cfg.embedding_dim, rng, True, dtype)

    def forward(self, maps: dict) -> Tensor:
        x = maps[4]
        if self.pre is not None:
            x = self.pre(x)
        return self.fc(self.pool(x))


class MsfaHead(Module):
    """Fuse stage maps 2/3/4 at the middle resolution, pool the fused map."""

    def __init__(self, stage_channels: dict, cfg: RunConfig, rng, dtype):
        super().__init__()
        if sorted(stage_channels) != [2, 3, 4]:
            raise ShapeError("feature-map fusion needs exactly stages 2, 3 and 4")
        k = cfg.msfa_downsample_kernel
        lo_ch, top_ch = stage_channels[2], stage_channels[4]
        self.down = Conv2d(ConvSpec(lo_ch, lo_ch, k, 2, k // 2), rng, dtype)
        self.down_bn = BatchNorm2d(lo_ch, dtype=dtype)
        self.top_mode = cfg.resolved_msfa_top_upsample()
        if self.top_mode == "tc":
            self.up = ConvTranspose2d.for_doubling(top_ch, top_ch, 3, rng, dtype)
        else:
            self.up = None
        fused = sum(stage_channels.values())
        channels = fused
        if cfg.pooling == "lde":
            self.pre = Conv2d(ConvSpec(fused, cfg.lde_channels, 1, bias=True), rng, dtype)
            channels = cfg.lde_channels
        else:
            self.pre = None
        self.pool = _make_pooling(cfg.pooling, channels, cfg, rng, dtype)
        self.fc = Linear(_pooled_dim(cfg.pooling, channels, cfg), cfg.embedding_dim, rng, True, dtype)

    def forward(self, maps: dict) -> Tensor:
        low = self.down_bn(self.down(maps[2])).relu()
        top = self.up(maps[4]) if self.up is not None else T.bilinear_upsample(maps[4])
        mid = maps[3]
        if low.shape[2:] != mid.shape[2:] or top.shape[2:] != mid.shape[2:]:
            raise ShapeError(
                f"resampled maps disagree: {low.shape} / {mid.shape} / {top.shape}")
        fused = T.concat([low, mid, top], axis=1)
        if self.pre is not None:
            fused = self.pre(fused)
        return self.fc(self.pool(fused))


class MseaHead(Module):
    """Per-stage projection and pooling, concatenated then FC."""

    def __init__(self, stage_channels: dict, cfg: RunConfig, rng, dtype):
        super().__init__()
        self.stages = tuple(sorted(stage_channels))
        proj = cfg.resolved_proj_channels()
        self.projs = [Conv2d(ConvSpec(stage_channels[s], proj, 1, bias=True), rng, dtype)
                      for s in self.stages]
        if cfg.pooling in ("lde",):
            shared = _make_pooling(cfg.pooling, proj, cfg, rng, dtype)
            self.pools = [shared for _ in self.stages]
        else:
            self.pools = [_make_pooling(cfg.pooling, proj, cfg, rng, dtype) for _ in self.stages]
        concat_dim = _pooled_dim(cfg.pooling, proj, cfg) * len(self.stages)
        self.fc = Linear(concat_dim, cfg.embedding_dim, rng, True, dtype)
        self.fc_relu = cfg.msea_fc_relu

    def forward(self, maps: dict) -> Tensor:
        pooled = [pool(proj(maps[s]))
                  for s, proj, pool in zip(self.stages, self.projs, self.pools)]
        out = self.fc(T.concat(pooled, axis=1))
        return out.relu() if self.fc_relu else out


class SpeakerNet(Module):
    """Backbone, optional pyramid, and one of the three embedding heads."""

    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        dtype = cfg.numpy_dtype()
        self.backbone = ResNetExtractor(
            BackboneConfig(stage_blocks=cfg.stage_blocks_tuple(),
                           stage_channels=cfg.stage_channels_tuple(),
                           conv1_kernel=cfg.conv1_kernel),
            rng, dtype)
        stages = cfg.resolved_stages()
        chans = cfg.stage_channels_tuple()
        if cfg.fpm != "none":
            pyr_stages = tuple(range(min(stages), 5))
            self.pyramid = FeaturePyramid(
                FpmConfig(variant=cfg.fpm, channels=cfg.resolved_pyramid_channels(),
                          stages=pyr_stages, smooth_bn_relu=cfg.fpm_smooth_bn_relu,
                          tc_kernel=cfg.tc_kernel),
                chans, rng, dtype)
            head_channels = {s: cfg.resolved_pyramid_channels() for s in stages}
        else:
            self.pyramid = None
            head_channels = {s: chans[s - 1] for s in stages}
        if cfg.aggregation == "single":
            self.head = SingleScaleHead(head_channels[4], cfg, rng, dtype)
        elif cfg.aggregation == "msfa":
            self.head = MsfaHead(head_channels, cfg, rng, dtype)
        else:
            self.head = MseaHead(head_channels, cfg, rng, dtype)

    def stage_maps(self, x: Tensor) -> dict:
        outs = self.backbone.forward_stages(x)
        if self.pyramid is not None:
            return self.pyramid(outs)
        return {s: outs.by_stage(s) for s in range(1, 5)}

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.stage_maps(x))


def build_model(cfg: RunConfig, seed: int | None = None) -> SpeakerNet:
    """Deterministic model construction from config (seed defaults to cfg.seed)."""
    rng = np.random.default_rng(np.random.PCG64(cfg.seed if seed is None else seed))
    return SpeakerNet(cfg, rng)


def features_to_input(feats: AcousticFeatures, dtype) -> Tensor:
    return Tensor(feats.mels.astype(dtype)[None, None, :, :])


def extract_embedding(feats: AcousticFeatures, model: SpeakerNet,
                      duration_s=None, utterance_id: str = "") -> SpeakerEmbedding:
    """Eval-mode embedding of one utterance from raw (unnormalized) log-Mels.

    Test-time duration truncation runs before normalization so the window
    statistics match what the network actually sees.
    """
    cfg = model.cfg
    if duration_s not in (None, "full"):
        mask = compute_vad_mask(feats, cfg.vad_threshold_db, cfg.vad_floor_db)
        feats = energy_vad_trim(feats, duration_s, mask=mask)
    feats = mean_normalize_sliding(feats, cfg.mean_norm_window_s)
    model.eval()
    with T.no_grad():
        out = model(features_to_input(feats, cfg.numpy_dtype()))
    return SpeakerEmbedding(vector=out.data[0].copy(), utterance_id=utterance_id)


def model_parameter_report(cfg: RunConfig, seed: int = 0) -> dict:
    """Submodule parameter counts for one configuration."""
    from .nn import parameter_counts
    return parameter_counts(build_model(cfg, seed))
