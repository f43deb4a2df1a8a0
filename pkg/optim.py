"""
optim.py

SGD with momentum and coupled weight decay, the two-pass SAM wrapper and the
staged + exponential learning-rate schedule.

Parameters, gradients and velocities are dicts of numpy arrays keyed by the
same names (Model.named_params() keys); updates happen in place.
"""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Tuple

import numpy as np

from errors import EpochOutOfRange, InvalidConfig, NonFiniteGradient, ShapeMismatch

logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]
LossFn = Callable[[bool], Tuple[float, Mapping[str, np.ndarray]]]

OPTIM_KINDS = ("sgd", "sam")


@dataclass(frozen=True)
class SgdConfig:
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def validate(self) -> None:
        if not 0 <= self.momentum < 1:
            raise InvalidConfig(f"optim.momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise InvalidConfig(f"optim.weight_decay must be >= 0, got {self.weight_decay}")


@dataclass(frozen=True)
class SamConfig:
    rho: float = 0.02
    grad_norm_floor: float = 1e-12

    def validate(self) -> None:
        if self.rho < 0:
            raise InvalidConfig(f"optim.rho must be >= 0, got {self.rho}")
        if not self.grad_norm_floor > 0:
            raise InvalidConfig("grad_norm_floor must be > 0")


@dataclass(frozen=True)
class LrSchedule:
    stage_lrs: List[float] = field(default_factory=lambda: [0.1, 0.01, 0.001])
    stage_boundaries: List[int] = field(default_factory=lambda: [20, 50])
    decay_gamma: float = 0.998
    total_epochs: int = 100

    def validate(self) -> None:
        lrs, bounds = list(self.stage_lrs), list(self.stage_boundaries)
        if len(lrs) != len(bounds) + 1:
            raise InvalidConfig(f"{len(bounds)} stage boundaries need {len(bounds) + 1} stage lrs, got {len(lrs)}")
        if any(lr <= 0 for lr in lrs) or any(a <= b for a, b in zip(lrs, lrs[1:])):
            raise InvalidConfig(f"schedule.stage_lrs must be positive and strictly decreasing: {lrs}")
        if any(a >= b for a, b in zip(bounds, bounds[1:])):
            raise InvalidConfig(f"schedule.stage_boundaries must be strictly increasing: {bounds}")
        if bounds and (bounds[0] <= 0 or bounds[-1] >= self.total_epochs):
            raise InvalidConfig(f"schedule.stage_boundaries must lie in (0, {self.total_epochs}): {bounds}")
        if not 0 < self.decay_gamma <= 1:
            raise InvalidConfig(f"schedule.gamma must lie in (0, 1], got {self.decay_gamma}")
        if self.total_epochs < 1:
            raise InvalidConfig("schedule.total_epochs must be >= 1")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    """stage_lr(epoch) * gamma**epoch; the decay counter never resets at stage boundaries."""
    if not 0 <= epoch < schedule.total_epochs:
        raise EpochOutOfRange(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    stage = bisect.bisect_right(list(schedule.stage_boundaries), epoch)
    return float(schedule.stage_lrs[stage] * schedule.decay_gamma ** epoch)


def init_velocity(params: Mapping[str, np.ndarray]) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def _check_finite(grads: Mapping[str, np.ndarray], where: str) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"{where}: gradient of {name} is not finite")


def sgd_step(
    params: Params,
    grads: Mapping[str, np.ndarray],
    velocity: Params,
    lr: float,
    cfg: SgdConfig = SgdConfig(),
) -> Params:
    """g' = g + wd*w; v = momentum*v + g'; w -= lr*v. Updates params and velocity in place."""
    if set(params) != set(grads) or set(params) != set(velocity):
        raise ShapeMismatch("params, grads and velocity must share the same keys")
    for name, w in params.items():
        if grads[name].shape != w.shape or velocity[name].shape != w.shape:
            raise ShapeMismatch(
                f"{name}: param {w.shape}, grad {grads[name].shape}, velocity {velocity[name].shape}"
            )
    _check_finite(grads, "sgd_step")

    for name, w in params.items():
        g = grads[name] + cfg.weight_decay * w if cfg.weight_decay else grads[name]
        v = velocity[name]
        v *= cfg.momentum
        v += g
        w -= lr * v
    return params


def global_norm(tensors: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(t, dtype=np.float64))) for t in tensors.values())))


def sam_perturbation(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                     sam: SamConfig, base: SgdConfig) -> Params:
    """eps = rho * g / max(||g||, floor), g including the coupled weight-decay term."""
    decayed = {k: grads[k] + base.weight_decay * params[k] if base.weight_decay else grads[k] for k in params}
    scale = sam.rho / max(global_norm(decayed), sam.grad_norm_floor)
    return {k: (scale * g).astype(params[k].dtype) for k, g in decayed.items()}


def sam_step(
    params: Params,
    loss_fn: LossFn,
    velocity: Params,
    lr: float,
    sam: SamConfig = SamConfig(),
    base: SgdConfig = SgdConfig(),
) -> Tuple[float, Params]:
    """One sharpness-aware step.

    ``loss_fn(update_stats)`` evaluates the loss and gradients at the current
    contents of ``params``; it is called with False for the ascent pass and
    True for the descent pass so batch-norm running stats move once per step.
    Weights are restored bitwise before the SGD update. Returns the loss of
    the first (unperturbed) pass.
    """
    loss, g1 = loss_fn(False)
    _check_finite(g1, "sam_step ascent")
    eps = sam_perturbation(params, g1, sam, base)

    saved = {k: w.copy() for k, w in params.items()}
    for k, w in params.items():
        w += eps[k]
    try:
        _, g2 = loss_fn(True)
        g2 = {k: np.array(g, copy=True) for k, g in g2.items()}
    finally:
        for k, w in params.items():
            w[...] = saved[k]
    _check_finite(g2, "sam_step descent")

    sgd_step(params, g2, velocity, lr, base)
    return loss, params
