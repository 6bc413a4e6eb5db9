"""Pooling layers mapping a variable-length feature map to a fixed vector.

GAP and statistics pooling reduce over all spatial positions. SAP and the
dictionary encoder work on per-frame vectors, obtained from a 4-D map by
averaging the frequency axis into the channel dimension, which keeps frame
semantics while staying duration-agnostic.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Linear, Module, Parameter
from .tensor import ShapeError, Tensor


def gap(x: Tensor) -> Tensor:
    """Mean over all spatial positions per channel: [B,C,F,T] -> [B,C]."""
    return x.mean(axis=(2, 3))


def statistics_pool(x: Tensor, eps: float = 1e-10) -> Tensor:
    """Concatenated per-channel mean and biased std: [B,C,F,T] -> [B,2C]."""
    mu = x.mean(axis=(2, 3))
    sd = T.spatial_std(x, axis=(2, 3), eps=eps)
    return T.concat([mu, sd], axis=1)


def frames_from_map(x: Tensor) -> Tensor:
    """Collapse frequency by mean: [B,C,F,T] -> [B,T,C] frame vectors."""
    return x.mean(axis=2).transpose(0, 2, 1)


class GlobalAveragePool(Module):
    def forward(self, x: Tensor) -> Tensor:
        return gap(x)

    @staticmethod
    def out_dim(channels: int) -> int:
        return channels


class StatisticsPool(Module):
    def forward(self, x: Tensor) -> Tensor:
        return statistics_pool(x)

    @staticmethod
    def out_dim(channels: int) -> int:
        return 2 * channels


class SelfAttentivePool(Module):
    """Softmax-weighted temporal mean with a learned attention head.

    Attention logit per frame is u^T tanh(W h_t + b); the weights form a
    distribution over frames.
    """

    def __init__(self, channels: int, rng: np.random.Generator,
                 hidden: int | None = None, dtype=np.float32):
        super().__init__()
        hidden = hidden or channels
        self.proj = Linear(channels, hidden, rng, bias=True, dtype=dtype)
        self.context = Parameter((rng.standard_normal(hidden) / np.sqrt(hidden)).astype(dtype))

    def attention(self, frames: Tensor) -> Tensor:
        scores = self.proj(frames).tanh() @ self.context.reshape(-1, 1)
        return T.softmax(scores, axis=1)  # [B,T,1]

    def forward(self, x: Tensor) -> Tensor:
        frames = frames_from_map(x)
        alpha = self.attention(frames)
        return (frames * alpha).sum(axis=1)

    @staticmethod
    def out_dim(channels: int) -> int:
        return channels


class DictionaryEncoder(Module):
    """Soft-assignment residual encoder over a learned codebook.

    Residuals r_tk = h_t - mu_k get weights softmax_k(-s_k ||r_tk||^2);
    per-codeword aggregates are weight-normalized, concatenated,
    L2-normalized and reduced by a fully-connected layer. In multi-stage
    use one instance is shared, so codebook, scales and the FC count once.
    """

    def __init__(self, feature_dim: int, num_codewords: int, out_dim: int,
                 rng: np.random.Generator, dtype=np.float32, eps: float = 1e-8):
        super().__init__()
        self.feature_dim = feature_dim
        self.num_codewords = num_codewords
        self.eps = eps
        self.codebook = Parameter((rng.standard_normal((num_codewords, feature_dim))
                                   / np.sqrt(feature_dim)).astype(dtype))
        self.scales = Parameter(np.ones(num_codewords, dtype=dtype), decay=False)
        self.fc = Linear(num_codewords * feature_dim, out_dim, rng, bias=True, dtype=dtype)
        self._out = out_dim

    def encode(self, frames: Tensor) -> Tensor:
        """[B,T,D] frames -> [B,K*D] normalized residual aggregate."""
        if frames.data.shape[2] != self.feature_dim:
            raise ShapeError(f"encoder expects {self.feature_dim}-dim frames, got {frames.data.shape}")
        b, t, d = frames.data.shape
        k = self.num_codewords
        r = frames.reshape(b, t, 1, d) - self.codebook.reshape(1, 1, k, d)
        sq = (r * r).sum(axis=3)                                # [B,T,K]
        w = T.softmax(sq * (self.scales.reshape(1, 1, k) * -1.0), axis=2)
        agg = (r * w.reshape(b, t, k, 1)).sum(axis=1)           # [B,K,D]
        denom = w.sum(axis=1).reshape(b, k, 1) + self.eps
        e = (agg / denom).reshape(b, k * d)
        return T.l2_normalize(e, axis=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc(self.encode(frames_from_map(x)))

    def out_dim(self, channels: int = 0) -> int:
        return self._out
