"""
nn_core.py

A small deterministic tensor engine for the layer set a MobileFaceNet needs.

- Tensors are numpy arrays in NCHW layout (images) or (N, D) layout (vectors).
- Every differentiable op comes as a forward function plus a matching
  ``*_backward`` function; the layer classes (Conv2d, BatchNorm2d, PReLU)
  cache what the backward pass needs.
- gradient_check() compares analytic gradients against central finite
  differences in float64.

Conventions:
- Convolutions are cross-correlations without bias; batch norm follows every
  conv and supplies the affine terms.
- Training runs in float32, gradient checks in float64.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import (
    DegenerateBatch,
    InvalidSpec,
    NonFiniteGradient,
    ShapeMismatch,
    ZeroVector,
)

logger = logging.getLogger(__name__)

TRAIN = "train"
INFER = "infer"

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
PRELU_INIT = 0.25
NORM_FLOOR = 1e-12

# Denominator floor for the relative error of gradient_check.
GRADCHECK_FLOOR = 1e-2


# -------------------------
# Specs and parameter state
# -------------------------
@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: Tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 0
    groups: int = 1
    has_bias: bool = False

    def validate(self) -> None:
        kh, kw = self.kernel
        if min(self.in_channels, self.out_channels, kh, kw, self.stride, self.groups) <= 0 or self.padding < 0:
            raise InvalidSpec(f"non-positive conv dimension in {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise InvalidSpec(
                f"channels ({self.in_channels}->{self.out_channels}) not divisible by groups={self.groups}"
            )
        if self.has_bias:
            raise InvalidSpec("conv bias is not supported; batch norm supplies the affine terms")

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel[0], self.kernel[1])

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    def output_hw(self, h: int, w: int) -> Tuple[int, int]:
        kh, kw = self.kernel
        return (
            (h + 2 * self.padding - kh) // self.stride + 1,
            (w + 2 * self.padding - kw) // self.stride + 1,
        )


@dataclass
class BatchNormState:
    bn_scale: np.ndarray
    bn_shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM
    mode: str = TRAIN

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(
            bn_scale=np.ones(channels, dtype=dtype),
            bn_shift=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    @property
    def channels(self) -> int:
        return int(self.bn_scale.shape[0])


@dataclass
class PReLUState:
    slope: np.ndarray

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "PReLUState":
        return cls(slope=np.full(channels, PRELU_INIT, dtype=dtype))


def init_conv_weight(spec: ConvSpec, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """He-normal init: std = sqrt(2 / fan_in), fan_in = kh * kw * Cin / groups."""
    spec.validate()
    _, cin_g, kh, kw = spec.weight_shape
    std = np.sqrt(2.0 / (kh * kw * cin_g))
    return (rng.standard_normal(spec.weight_shape) * std).astype(dtype)


# -------------------------
# conv2d
# -------------------------
def _check_conv(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> Tuple[int, int]:
    spec.validate()
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeMismatch(f"conv input {x.shape} does not match in_channels={spec.in_channels}")
    if tuple(w.shape) != spec.weight_shape:
        raise ShapeMismatch(f"conv weight {w.shape} != expected {spec.weight_shape}")
    ho, wo = spec.output_hw(x.shape[2], x.shape[3])
    if ho <= 0 or wo <= 0:
        raise ShapeMismatch(f"conv output would be empty for input {x.shape} and {spec}")
    return ho, wo


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="constant")


def _window(i: int, j: int, stride: int, ho: int, wo: int) -> Tuple[slice, slice, slice, slice]:
    return (
        slice(None),
        slice(None),
        slice(i, i + stride * (ho - 1) + 1, stride),
        slice(j, j + stride * (wo - 1) + 1, stride),
    )


def _dense_forward(xp: np.ndarray, w: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
    n, cin = xp.shape[:2]
    cout, _, kh, kw = w.shape
    out = np.zeros((n, cout, ho * wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols = xp[_window(i, j, stride, ho, wo)].reshape(n, cin, ho * wo)
            out += np.matmul(w[:, :, i, j], cols)
    return out.reshape(n, cout, ho, wo)


def _depthwise_forward(xp: np.ndarray, w: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    _, _, kh, kw = w.shape
    out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[_window(i, j, stride, ho, wo)] * w[:, 0, i, j][None, :, None, None]
    return out


def conv2d(x: np.ndarray, weights: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Grouped 2D cross-correlation, output (N, Cout, H', W')."""
    ho, wo = _check_conv(x, weights, spec)
    xp = _pad(x, spec.padding)
    if spec.groups == 1:
        return _dense_forward(xp, weights, spec.stride, ho, wo)
    if spec.is_depthwise:
        return _depthwise_forward(xp, weights, spec.stride, ho, wo)
    cin_g = spec.in_channels // spec.groups
    cout_g = spec.out_channels // spec.groups
    parts = [
        _dense_forward(
            xp[:, g * cin_g:(g + 1) * cin_g],
            weights[g * cout_g:(g + 1) * cout_g],
            spec.stride,
            ho,
            wo,
        )
        for g in range(spec.groups)
    ]
    return np.concatenate(parts, axis=1)


def _dense_backward(xp, w, dout, stride, ho, wo):
    n, cin = xp.shape[:2]
    cout, _, kh, kw = w.shape
    dflat = dout.reshape(n, cout, ho * wo)
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            win = _window(i, j, stride, ho, wo)
            cols = xp[win].reshape(n, cin, ho * wo)
            dw[:, :, i, j] = np.tensordot(dflat, cols, axes=([0, 2], [0, 2]))
            dxp[win] += np.matmul(w[:, :, i, j].T, dflat).reshape(n, cin, ho, wo)
    return dxp, dw


def _depthwise_backward(xp, w, dout, stride, ho, wo):
    _, _, kh, kw = w.shape
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            win = _window(i, j, stride, ho, wo)
            dw[:, 0, i, j] = np.sum(dout * xp[win], axis=(0, 2, 3))
            dxp[win] += dout * w[:, 0, i, j][None, :, None, None]
    return dxp, dw


def conv2d_backward(
    x: np.ndarray, weights: np.ndarray, spec: ConvSpec, dout: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Return (dx, dweights) for conv2d given the upstream gradient."""
    ho, wo = _check_conv(x, weights, spec)
    if dout.shape != (x.shape[0], spec.out_channels, ho, wo):
        raise ShapeMismatch(f"conv upstream gradient {dout.shape} does not match output shape")
    xp = _pad(x, spec.padding)
    if spec.groups == 1:
        dxp, dw = _dense_backward(xp, weights, dout, spec.stride, ho, wo)
    elif spec.is_depthwise:
        dxp, dw = _depthwise_backward(xp, weights, dout, spec.stride, ho, wo)
    else:
        cin_g = spec.in_channels // spec.groups
        cout_g = spec.out_channels // spec.groups
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(weights)
        for g in range(spec.groups):
            ci = slice(g * cin_g, (g + 1) * cin_g)
            co = slice(g * cout_g, (g + 1) * cout_g)
            dxp[:, ci], dw[co] = _dense_backward(xp[:, ci], weights[co], dout[:, co], spec.stride, ho, wo)
    p = spec.padding
    dx = dxp[:, :, p:p + x.shape[2], p:p + x.shape[3]] if p else dxp
    return np.ascontiguousarray(dx), dw


# -------------------------
# batch norm
# -------------------------
@dataclass
class _BatchNormCache:
    x_hat: np.ndarray
    std: np.ndarray
    mode: str


def _check_bn(x: np.ndarray, state: BatchNormState) -> None:
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ShapeMismatch(f"batchnorm input {x.shape} does not match {state.channels} channels")


def _bn_forward(x: np.ndarray, state: BatchNormState, update_stats: bool) -> Tuple[np.ndarray, _BatchNormCache]:
    _check_bn(x, state)
    bshape = (1, -1, 1, 1)
    if state.mode == TRAIN:
        n, _, h, w = x.shape
        if n * h * w < 2:
            raise DegenerateBatch(f"train-mode batch norm needs >= 2 values per channel, got {n * h * w}")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if update_stats:
            m = state.momentum
            state.running_mean[...] = m * state.running_mean + (1.0 - m) * mean
            state.running_var[...] = m * state.running_var + (1.0 - m) * var
    else:
        mean = state.running_mean
        var = state.running_var
    std = np.sqrt(var + state.eps).astype(x.dtype)
    x_hat = (x - mean.reshape(bshape)) / std.reshape(bshape)
    out = state.bn_scale.reshape(bshape) * x_hat + state.bn_shift.reshape(bshape)
    return out.astype(x.dtype, copy=False), _BatchNormCache(x_hat=x_hat, std=std, mode=state.mode)


def batchnorm(x: np.ndarray, state: BatchNormState, update_stats: bool = True) -> np.ndarray:
    """Per-channel batch norm; train mode normalizes with batch stats and updates running stats."""
    out, _ = _bn_forward(x, state, update_stats)
    return out


def batchnorm_backward(
    dout: np.ndarray, cache: _BatchNormCache, state: BatchNormState
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (dx, dscale, dshift)."""
    bshape = (1, -1, 1, 1)
    x_hat = cache.x_hat
    dscale = np.sum(dout * x_hat, axis=(0, 2, 3))
    dshift = np.sum(dout, axis=(0, 2, 3))
    dx_hat = dout * state.bn_scale.reshape(bshape)
    if cache.mode == TRAIN:
        mean_dx_hat = dx_hat.mean(axis=(0, 2, 3), keepdims=True)
        mean_dx_hat_xhat = (dx_hat * x_hat).mean(axis=(0, 2, 3), keepdims=True)
        dx = (dx_hat - mean_dx_hat - x_hat * mean_dx_hat_xhat) / cache.std.reshape(bshape)
    else:
        dx = dx_hat / cache.std.reshape(bshape)
    return dx, dscale, dshift


# -------------------------
# PReLU
# -------------------------
def _check_prelu(x: np.ndarray, state: PReLUState) -> None:
    if x.ndim < 2 or x.shape[1] != state.slope.shape[0]:
        raise ShapeMismatch(f"prelu input {x.shape} does not match {state.slope.shape[0]} slopes")


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def prelu(x: np.ndarray, state: PReLUState) -> np.ndarray:
    _check_prelu(x, state)
    return np.where(x > 0, x, _channel_view(state.slope, x.ndim) * x).astype(x.dtype, copy=False)


def prelu_backward(x: np.ndarray, state: PReLUState, dout: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Return (dx, dslope)."""
    _check_prelu(x, state)
    pos = x > 0
    dx = np.where(pos, dout, _channel_view(state.slope, x.ndim) * dout)
    axes = (0,) + tuple(range(2, x.ndim))
    dslope = np.sum(np.where(pos, 0.0, dout * x), axis=axes).astype(state.slope.dtype)
    return dx, dslope


# -------------------------
# L2 normalization
# -------------------------
def _row_norms(v: np.ndarray) -> np.ndarray:
    if v.ndim != 2:
        raise ShapeMismatch(f"l2_normalize expects (N, D), got {v.shape}")
    norms = np.sqrt(np.sum(v * v, axis=1, keepdims=True))
    if np.any(norms <= NORM_FLOOR):
        bad = int(np.argmax(norms[:, 0] <= NORM_FLOOR))
        raise ZeroVector(f"row {bad} has norm <= {NORM_FLOOR:g}")
    return norms


def l2_normalize(v: np.ndarray) -> np.ndarray:
    return v / _row_norms(v)


def l2_normalize_backward(v: np.ndarray, dout: np.ndarray) -> np.ndarray:
    norms = _row_norms(v)
    y = v / norms
    return (dout - y * np.sum(y * dout, axis=1, keepdims=True)) / norms


# -------------------------
# Layers
# -------------------------
class Layer:
    """A parameterized op with cached forward state for its backward pass."""

    def forward(self, x: np.ndarray, mode: str = TRAIN) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> Dict[str, np.ndarray]:
        return {}

    def grads(self) -> Dict[str, np.ndarray]:
        return {}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def flops(self, c: int, h: int, w: int) -> Tuple[int, Tuple[int, int, int]]:
        """Per-sample FLOPs for an input of shape (c, h, w) and the output shape."""
        raise NotImplementedError

    def astype(self, dtype) -> None:
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, spec: ConvSpec, weight: np.ndarray):
        spec.validate()
        if tuple(weight.shape) != spec.weight_shape:
            raise ShapeMismatch(f"weight {weight.shape} != {spec.weight_shape}")
        self.spec = spec
        self.weight = weight
        self.dweight = np.zeros_like(weight)
        self._x: Optional[np.ndarray] = None

    def forward(self, x, mode=TRAIN):
        self._x = x
        return conv2d(x, self.weight, self.spec)

    def backward(self, dout):
        dx, dw = conv2d_backward(self._x, self.weight, self.spec, dout)
        self.dweight = dw
        return dx

    def params(self):
        return {"weight": self.weight}

    def grads(self):
        return {"weight": self.dweight}

    def flops(self, c, h, w):
        kh, kw = self.spec.kernel
        ho, wo = self.spec.output_hw(h, w)
        cin_g = self.spec.in_channels // self.spec.groups
        return 2 * kh * kw * cin_g * self.spec.out_channels * ho * wo, (self.spec.out_channels, ho, wo)

    def astype(self, dtype):
        self.weight = self.weight.astype(dtype)
        self.dweight = np.zeros_like(self.weight)


class BatchNorm2d(Layer):
    def __init__(self, state: BatchNormState):
        self.state = state
        self.update_stats = True
        self._cache: Optional[_BatchNormCache] = None
        self.dscale = np.zeros_like(state.bn_scale)
        self.dshift = np.zeros_like(state.bn_shift)

    def forward(self, x, mode=TRAIN):
        self.state.mode = mode
        out, self._cache = _bn_forward(x, self.state, self.update_stats)
        return out

    def backward(self, dout):
        dx, self.dscale, self.dshift = batchnorm_backward(dout, self._cache, self.state)
        return dx

    def params(self):
        return {"scale": self.state.bn_scale, "shift": self.state.bn_shift}

    def grads(self):
        return {"scale": self.dscale, "shift": self.dshift}

    def buffers(self):
        return {"running_mean": self.state.running_mean, "running_var": self.state.running_var}

    def flops(self, c, h, w):
        return 2 * c * h * w, (c, h, w)

    def astype(self, dtype):
        s = self.state
        s.bn_scale, s.bn_shift = s.bn_scale.astype(dtype), s.bn_shift.astype(dtype)
        s.running_mean, s.running_var = s.running_mean.astype(dtype), s.running_var.astype(dtype)
        self.dscale, self.dshift = np.zeros_like(s.bn_scale), np.zeros_like(s.bn_shift)


class PReLU(Layer):
    def __init__(self, state: PReLUState):
        self.state = state
        self.dslope = np.zeros_like(state.slope)
        self._x: Optional[np.ndarray] = None

    def forward(self, x, mode=TRAIN):
        self._x = x
        return prelu(x, self.state)

    def backward(self, dout):
        dx, self.dslope = prelu_backward(self._x, self.state, dout)
        return dx

    def params(self):
        return {"slope": self.state.slope}

    def grads(self):
        return {"slope": self.dslope}

    def flops(self, c, h, w):
        return c * h * w, (c, h, w)

    def astype(self, dtype):
        self.state.slope = self.state.slope.astype(dtype)
        self.dslope = np.zeros_like(self.state.slope)


# -------------------------
# Gradient checking
# -------------------------
@dataclass
class GradCase:
    """Arrays under test plus closures over them.

    ``forward()`` reads ``inputs`` and ``params`` in place; ``backward(dout)``
    returns gradients aligned with ``inputs`` and with the keys of ``params``.
    """

    name: str
    inputs: List[np.ndarray]
    params: Dict[str, np.ndarray]
    forward: Callable[[], np.ndarray]
    backward: Callable[[np.ndarray], Tuple[List[np.ndarray], Dict[str, np.ndarray]]]
    # Arrays whose gradient is not checked (e.g. integer labels).
    frozen: List[str] = field(default_factory=list)


CaseFactory = Callable[[Sequence[Tuple[int, ...]], np.random.Generator], GradCase]


def _draw_away_from_kink(shape, rng: np.random.Generator, margin: float = 1e-3) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) <= margin
    while np.any(bad):
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) <= margin
    return x


def _conv_case(shapes, rng, groups_mode: str) -> GradCase:
    x = rng.standard_normal(shapes[0])
    n, c, h, w = x.shape
    if groups_mode == "dense":
        cout, _, kh, kw = shapes[1]
        spec = ConvSpec(c, cout, (kh, kw), stride=1, padding=kh // 2)
    elif groups_mode == "depthwise":
        spec = ConvSpec(c, c, (3, 3), stride=2, padding=1, groups=c)
    else:
        spec = ConvSpec(c, c, (h, w), stride=1, padding=0, groups=c)
    weight = init_conv_weight(spec, rng, np.float64)

    def forward():
        return conv2d(x, weight, spec)

    def backward(dout):
        dx, dw = conv2d_backward(x, weight, spec, dout)
        return [dx], {"weight": dw}

    return GradCase(f"conv2d[{groups_mode}]", [x], {"weight": weight}, forward, backward)


def _batchnorm_case(shapes, rng) -> GradCase:
    x = rng.standard_normal(shapes[0])
    state = BatchNormState.create(x.shape[1], np.float64)
    state.bn_scale[...] = rng.uniform(0.5, 1.5, state.channels)
    state.bn_shift[...] = rng.standard_normal(state.channels)
    cache: Dict[str, _BatchNormCache] = {}

    def forward():
        out, cache["bn"] = _bn_forward(x, state, update_stats=False)
        return out

    def backward(dout):
        forward()
        dx, dscale, dshift = batchnorm_backward(dout, cache["bn"], state)
        return [dx], {"scale": dscale, "shift": dshift}

    return GradCase("batchnorm", [x], {"scale": state.bn_scale, "shift": state.bn_shift}, forward, backward)


def _prelu_case(shapes, rng) -> GradCase:
    x = _draw_away_from_kink(shapes[0], rng)
    state = PReLUState.create(x.shape[1], np.float64)
    state.slope[...] = rng.uniform(0.05, 0.5, state.slope.shape)

    def forward():
        return prelu(x, state)

    def backward(dout):
        dx, dslope = prelu_backward(x, state, dout)
        return [dx], {"slope": dslope}

    return GradCase("prelu", [x], {"slope": state.slope}, forward, backward)


def _l2_case(shapes, rng) -> GradCase:
    v = rng.standard_normal(shapes[0])

    def forward():
        return l2_normalize(v)

    def backward(dout):
        return [l2_normalize_backward(v, dout)], {}

    return GradCase("l2_normalize", [v], {}, forward, backward)


BUILTIN_CASES: Dict[str, CaseFactory] = {
    "conv2d": lambda s, r: _conv_case(s, r, "dense"),
    "depthwise_conv2d": lambda s, r: _conv_case(s, r, "depthwise"),
    "gdconv": lambda s, r: _conv_case(s, r, "global"),
    "batchnorm": _batchnorm_case,
    "prelu": _prelu_case,
    "l2_normalize": _l2_case,
}


def _numeric_grad(f: Callable[[], float], arr: np.ndarray, idx) -> float:
    orig = float(arr[idx])
    h = 1e-5 * max(1.0, abs(orig))
    arr[idx] = orig + h
    f_plus = f()
    arr[idx] = orig - h
    f_minus = f()
    arr[idx] = orig
    return (f_plus - f_minus) / (2.0 * h)


def gradient_check(
    op_under_test: Union[str, CaseFactory],
    input_shapes: Sequence[Tuple[int, ...]],
    seed: int,
    samples_per_array: Optional[int] = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The scalar under test is the sum of the outputs weighted by a fixed random
    probe tensor (a plain sum has an identically zero input gradient for batch
    norm). ``op_under_test`` is a built-in op name or a factory returning a
    GradCase. ``samples_per_array`` limits the number of checked entries per
    array (drawn with the same seed); None checks every entry.

    The relative error divides by max(|analytic|, |numeric|, GRADCHECK_FLOOR),
    so gradient entries smaller than the floor are judged by absolute error.
    """
    rng = np.random.default_rng(seed)
    if isinstance(op_under_test, str):
        try:
            factory = BUILTIN_CASES[op_under_test]
        except KeyError:
            raise ValueError(f"unknown op for gradient_check: {op_under_test!r}") from None
    else:
        factory = op_under_test
    case = factory(input_shapes, rng)

    out = np.asarray(case.forward(), dtype=np.float64)
    probe = rng.standard_normal(out.shape) if out.ndim else np.float64(1.0)
    d_inputs, d_params = case.backward(probe)

    def scalar() -> float:
        return float(np.sum(np.asarray(case.forward(), dtype=np.float64) * probe))

    pairs = [(f"input{k}", a, g) for k, (a, g) in enumerate(zip(case.inputs, d_inputs))]
    pairs += [(name, case.params[name], d_params[name]) for name in case.params]

    worst = 0.0
    for name, arr, grad in pairs:
        if name in case.frozen:
            continue
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradient(f"{case.name}: analytic gradient of {name} is not finite")
        indices = list(np.ndindex(arr.shape))
        if samples_per_array is not None and len(indices) > samples_per_array:
            picks = rng.choice(len(indices), size=samples_per_array, replace=False)
            indices = [indices[i] for i in sorted(picks)]
        for idx in indices:
            num = _numeric_grad(scalar, arr, idx)
            ana = float(grad[idx])
            if not np.isfinite(num):
                raise NonFiniteGradient(f"{case.name}: numeric gradient of {name}{idx} is not finite")
            rel = abs(ana - num) / max(abs(ana), abs(num), GRADCHECK_FLOOR)
            worst = max(worst, rel)
    logger.debug("gradient_check %s: max relative error %.3e", case.name, worst)
    return worst
