"""Training objectives: softmax CE, angular-margin softmax, ring loss.

The angular-margin head replaces the true-class logit ||x|| cos(theta) with
||x|| psi(theta), psi(theta) = (-1)^k cos(m theta) - 2k on [k pi/m,
(k+1) pi/m], against L2-normalized class weights. Early in training the
margin logit is blended with the plain cosine logit, with blend weight
lambda = max(lambda_min, lambda_base / (1 + gamma * iteration)); without
that annealing an m=4 margin is untrainable from scratch.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Linear, Module, Parameter
from .tensor import Tensor


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise IndexError(f"label out of range for {num_classes} classes: {labels}")
    return labels


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = _check_labels(labels, logits.shape[1])
    logp = T.log_softmax(logits, axis=1)
    picked = T.take_along(logp, labels[:, None], axis=1)
    return -picked.mean()


class SoftmaxClassifier(Module):
    """Plain affine classifier head with cross-entropy."""

    def __init__(self, num_speakers: int, embedding_dim: int, rng, dtype=np.float32):
        super().__init__()
        self.fc = Linear(embedding_dim, num_speakers, rng, bias=True, dtype=dtype)
        self.num_speakers = num_speakers

    def logits(self, emb: Tensor) -> Tensor:
        return self.fc(emb)

    def loss(self, emb: Tensor, labels) -> Tensor:
        return cross_entropy(self.logits(emb), labels)


class AngularMarginClassifier(Module):
    """Multiplicative angular margin on the true-class angle.

    Weight rows are renormalized every forward; embeddings keep their norm
    (the ring loss, when enabled, is what controls it). ``anneal=False``
    applies the pure margin logit, used by tests and late-stage training.
    """

    def __init__(self, num_speakers: int, embedding_dim: int, margin: int, rng,
                 lambda_base: float = 1000.0, lambda_gamma: float = 0.1,
                 lambda_min: float = 5.0, dtype=np.float32):
        super().__init__()
        if margin not in (1, 2, 3, 4):
            raise ValueError(f"margin must be 1..4, got {margin}")
        self.weight = Parameter((rng.standard_normal((num_speakers, embedding_dim))
                                 / np.sqrt(embedding_dim)).astype(dtype))
        self.margin = margin
        self.lambda_base = lambda_base
        self.lambda_gamma = lambda_gamma
        self.lambda_min = lambda_min
        self.iteration = 0
        self.num_speakers = num_speakers

    def anneal_lambda(self) -> float:
        return max(self.lambda_min, self.lambda_base / (1.0 + self.lambda_gamma * self.iteration))

    def logits(self, emb: Tensor) -> Tensor:
        return emb @ T.l2_normalize(self.weight, axis=1).transpose(1, 0)

    def loss(self, emb: Tensor, labels, anneal: bool = True) -> Tensor:
        labels = _check_labels(labels, self.num_speakers)
        sq = (emb * emb).sum(axis=1, keepdims=True)
        if np.any(sq.data <= 1e-16):
            raise T.NumericError("zero-norm embedding in margin loss")
        norms = (sq + 1e-12).sqrt()
        logits = self.logits(emb)                      # ||x|| cos(theta_j)
        target = T.take_along(logits, labels[:, None], axis=1)
        # Pull cos into (-1, 1) so acos stays differentiable; the scaling is
        # part of both the value and the gradient, so finite differences agree.
        cos_t = target / norms * (1.0 - 1e-9)
        theta = cos_t.acos()
        k = np.floor(self.margin * theta.data / np.pi)
        sign = np.power(-1.0, k)
        psi = (theta * float(self.margin)).cos() * sign - 2.0 * k
        margined = norms * psi
        if anneal:
            lam = self.anneal_lambda()
            margined = (target * lam + margined) * (1.0 / (1.0 + lam))
        onehot = np.zeros(logits.shape, dtype=logits.dtype)
        np.put_along_axis(onehot, labels[:, None], 1.0, axis=1)
        adjusted = logits + Tensor(onehot) * (margined - target)
        return cross_entropy(adjusted, labels)

    def step_iteration(self) -> None:
        self.iteration += 1


class RingLoss(Module):
    """Quadratic pull of embedding norms toward a learnable radius.

    loss = weight/2 * mean((||x|| - R)^2); R is initialized lazily from the
    first batch's mean norm when constructed with radius <= 0.
    """

    def __init__(self, weight: float = 0.01, radius: float = 0.0, dtype=np.float32):
        super().__init__()
        self.weight = weight
        self.radius = Parameter(np.array([max(radius, 0.0)], dtype=dtype), decay=False)
        self._initialized = radius > 0.0

    def loss(self, emb: Tensor) -> Tensor:
        norms = ((emb * emb).sum(axis=1) + 1e-12).sqrt()
        if not self._initialized:
            self.radius.data[:] = float(norms.data.mean())
            self._initialized = True
        d = norms - self.radius
        return (d * d).mean() * (0.5 * self.weight)


class Objective(Module):
    """Classifier plus optional ring regularizer behind one loss() call."""

    def __init__(self, classifier: Module, ring: RingLoss | None = None):
        super().__init__()
        self.classifier = classifier
        self.ring = ring

    def loss(self, emb: Tensor, labels) -> Tensor:
        total = self.classifier.loss(emb, labels)
        if self.ring is not None:
            total = total + self.ring.loss(emb)
        return total

    def logits(self, emb: Tensor) -> Tensor:
        return self.classifier.logits(emb)

    def step_iteration(self) -> None:
        if isinstance(self.classifier, AngularMarginClassifier):
            self.classifier.step_iteration()


def build_objective(cfg, rng, dtype) -> Objective:
    """Objective selected by config: softmax | asoftmax | asoftmax_ring."""
    if cfg.loss == "softmax":
        return Objective(SoftmaxClassifier(cfg.num_speakers, cfg.embedding_dim, rng, dtype))
    margin_head = AngularMarginClassifier(
        cfg.num_speakers, cfg.embedding_dim, cfg.margin, rng,
        cfg.margin_lambda_base, cfg.margin_lambda_gamma, cfg.margin_lambda_min, dtype)
    ring = RingLoss(cfg.ring_weight, dtype=dtype) if cfg.loss == "asoftmax_ring" else None
    return Objective(margin_head, ring)
