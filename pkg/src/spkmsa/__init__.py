"""Multi-scale speaker embedding engine with pyramid feature enhancement.

A self-contained speaker-verification stack: log-Mel frontend, ResNet-style
extractor with a top-down feature pyramid, multi-scale aggregation heads,
trainable losses, cosine scoring and EER/minDCF evaluation, all on a small
numpy-backed autodiff engine.
"""

__version__ = "0.1.0"

from .tensor import Tensor, NumericError, ShapeError, grad_check, no_grad  # noqa: F401
