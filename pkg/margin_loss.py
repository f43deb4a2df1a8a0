"""
margin_loss.py

Additive angular margin (ArcFace-style) classification loss.

Embeddings and class-weight rows are L2-normalized on the fly; the target
logit becomes cos(theta_y + m) (or cos(theta_y) - m*sin(m) once theta_y + m
would pass pi) and every logit is scaled by s before softmax cross-entropy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax

from errors import InvalidConfig, LabelOutOfRange, ShapeMismatch
from nn_core import GradCase, l2_normalize, l2_normalize_backward

COS_CLAMP = 1e-7


@dataclass(frozen=True)
class MarginConfig:
    scale: float = 64.0
    margin: float = 0.5

    def validate(self) -> None:
        if not self.scale > 0:
            raise InvalidConfig(f"loss.scale must be > 0, got {self.scale}")
        if not 0 <= self.margin < math.pi / 2:
            raise InvalidConfig(f"loss.margin must lie in [0, pi/2), got {self.margin}")


@dataclass
class ClassifierHead:
    class_weights: np.ndarray

    @classmethod
    def create(cls, num_classes: int, dim: int, rng: np.random.Generator, dtype=np.float32) -> "ClassifierHead":
        return cls((rng.standard_normal((num_classes, dim)) * 0.01).astype(dtype))

    @property
    def num_classes(self) -> int:
        return int(self.class_weights.shape[0])


class ArcFaceGrads(NamedTuple):
    embeddings: np.ndarray
    class_weights: np.ndarray


def arcface_loss(
    embeddings: np.ndarray,
    head: ClassifierHead,
    labels: Sequence[int],
    cfg: MarginConfig = MarginConfig(),
) -> Tuple[float, ArcFaceGrads]:
    """Mean margin cross-entropy over the batch plus gradients w.r.t. embeddings and class weights."""
    cfg.validate()
    labels = np.asarray(labels, dtype=np.int64)
    weights = head.class_weights
    if embeddings.ndim != 2 or embeddings.shape[0] < 1 or embeddings.shape[0] != labels.shape[0]:
        raise ShapeMismatch(f"embeddings {embeddings.shape} do not match {labels.shape[0]} labels")
    if weights.ndim != 2 or weights.shape[1] != embeddings.shape[1]:
        raise ShapeMismatch(f"class weights {weights.shape} do not match embedding width {embeddings.shape[1]}")
    if labels.min() < 0 or labels.max() >= weights.shape[0]:
        raise LabelOutOfRange(f"labels must lie in [0, {weights.shape[0]}), got [{labels.min()}, {labels.max()}]")

    s, m = cfg.scale, cfg.margin
    n = embeddings.shape[0]
    rows = np.arange(n)

    en = l2_normalize(embeddings)
    wn = l2_normalize(weights)
    cos = en @ wn.T
    clipped = np.clip(cos, -1.0 + COS_CLAMP, 1.0 - COS_CLAMP)

    cos_y = clipped[rows, labels]
    theta = np.arccos(cos_y)
    regular = theta <= math.pi - m
    target = np.where(regular, np.cos(theta + m), cos_y - m * math.sin(m))

    logits = s * clipped
    logits[rows, labels] = s * target
    logp = log_softmax(logits, axis=1)
    loss = float(-np.mean(logp[rows, labels]))

    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    dcos = (s / n) * dlogits
    dcos[rows, labels] *= np.where(regular, np.sin(theta + m) / np.sin(theta), 1.0)
    dcos *= np.abs(cos) < 1.0 - COS_CLAMP

    d_emb = l2_normalize_backward(embeddings, dcos @ wn)
    d_w = l2_normalize_backward(weights, dcos.T @ en)
    return loss, ArcFaceGrads(d_emb.astype(embeddings.dtype), d_w.astype(weights.dtype))


def arcface_grad_case(cfg: MarginConfig = MarginConfig(scale=16.0)):
    """GradCase factory over shapes [(N, D), (num_classes, D)]."""

    def factory(input_shapes, rng):
        (n, d), (k, _) = input_shapes
        e = rng.standard_normal((n, d))
        head = ClassifierHead(rng.standard_normal((k, d)))
        labels = rng.integers(0, k, size=n)

        def forward():
            return arcface_loss(e, head, labels, cfg)[0]

        def backward(dout):
            _, g = arcface_loss(e, head, labels, cfg)
            return [g.embeddings * dout], {"class_weights": g.class_weights * dout}

        return GradCase("arcface_loss", [e], {"class_weights": head.class_weights}, forward, backward)

    return factory
