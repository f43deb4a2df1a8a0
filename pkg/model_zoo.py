"""
model_zoo.py

MobileFaceNet family builder.

- ArchConfig describes the network declaratively: a stage table, a width
  multiplier applied to every channel count except the embedding, and optional
  per-stage channel overrides.
- build_model(config, seed) turns the table into conv/BN/PReLU units grouped
  in blocks (bottlenecks carry a residual when stride 1 and channels match).
- count_params / count_flops / model_size_mb report the static costs;
  layer_table(config) computes the same numbers analytically without weights.

Named presets live in data/archs.json; DEFAULT_ARCH_PRESETS is the fallback.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from errors import InvalidConfig, ShapeMismatch
from nn_core import (
    INFER,
    TRAIN,
    BatchNorm2d,
    BatchNormState,
    Conv2d,
    ConvSpec,
    GradCase,
    PReLU,
    PReLUState,
    init_conv_weight,
    l2_normalize,
)

logger = logging.getLogger(__name__)

STAGE_KINDS = ("conv", "dwconv", "bottleneck", "gdconv", "linear_conv")
BYTES_PER_PARAM = 4
PUBLISHED_WIDE_PARAMS = 2_100_000


@dataclass(frozen=True)
class StageSpec:
    kind: str
    t: int = 1
    c: int = 0
    n: int = 1
    s: int = 1
    # Spatial kernel; None means 3 for conv/dwconv and "whole feature map" for gdconv.
    kernel: Optional[int] = None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "t": self.t, "c": self.c, "n": self.n, "s": self.s, "kernel": self.kernel}

    @classmethod
    def from_dict(cls, d: dict) -> "StageSpec":
        return cls(
            kind=str(d["kind"]),
            t=int(d.get("t", 1)),
            c=int(d.get("c", 0)),
            n=int(d.get("n", 1)),
            s=int(d.get("s", 1)),
            kernel=None if d.get("kernel") is None else int(d["kernel"]),
        )


# Baseline MobileFaceNet table (input 112x112x3).
MOBILEFACENET_STAGES: Tuple[StageSpec, ...] = (
    StageSpec("conv", c=64, s=2),
    StageSpec("dwconv", c=64, s=1),
    StageSpec("bottleneck", t=2, c=64, n=5, s=2),
    StageSpec("bottleneck", t=4, c=128, n=1, s=2),
    StageSpec("bottleneck", t=2, c=128, n=6, s=1),
    StageSpec("bottleneck", t=4, c=128, n=1, s=2),
    StageSpec("bottleneck", t=2, c=128, n=2, s=1),
    StageSpec("conv", c=512, s=1, kernel=1),
    StageSpec("gdconv"),
    StageSpec("linear_conv"),
)


@dataclass
class ArchConfig:
    input_size: Tuple[int, int] = (112, 112)
    embedding_dim: int = 512
    width_mult: float = 1.0
    channel_round: int = 8
    stage_table: List[StageSpec] = field(default_factory=lambda: list(MOBILEFACENET_STAGES))
    per_stage_channel_override: Optional[List[Optional[int]]] = None
    # Caps every stage's repeat count (desk-scale variants).
    stage_repeats: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "embedding_dim": self.embedding_dim,
            "width_mult": self.width_mult,
            "channel_round": self.channel_round,
            "stage_table": [s.to_dict() for s in self.stage_table],
            "per_stage_channel_override": self.per_stage_channel_override,
            "stage_repeats": self.stage_repeats,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        try:
            size = d.get("input_size", (112, 112))
            if isinstance(size, int):
                size = (size, size)
            table = d.get("stage_table")
            return cls(
                input_size=(int(size[0]), int(size[1])),
                embedding_dim=int(d.get("embedding_dim", 512)),
                width_mult=float(d.get("width_mult", 1.0)),
                channel_round=int(d.get("channel_round", 8)),
                stage_table=list(MOBILEFACENET_STAGES) if table is None else [StageSpec.from_dict(s) for s in table],
                per_stage_channel_override=d.get("per_stage_channel_override"),
                stage_repeats=None if d.get("stage_repeats") is None else int(d["stage_repeats"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidConfig(f"malformed architecture description: {exc}") from exc


# ------------------------------
# Presets (data/archs.json)
# ------------------------------
DEFAULT_ARCH_PRESETS: Dict[str, dict] = {
    "mobilefacenet": {"width_mult": 1.0, "embedding_dim": 512},
    "mmobilefacenet": {"width_mult": 2.0, "embedding_dim": 512},
    "mmobilefacenet-2m": {
        "width_mult": 2.0,
        "embedding_dim": 512,
        "per_stage_channel_override": [128, 128, 128, 128, 128, 128, 128, 1280, None, None],
    },
    "mobilefacenet-desk": {"input_size": 56, "width_mult": 0.5, "embedding_dim": 512, "stage_repeats": 1},
}


def _load_arch_presets_from_json() -> Dict[str, dict]:
    """Load presets from $LWFR_ARCH_PRESETS or data/archs.json; defaults on any error."""
    path = os.environ.get("LWFR_ARCH_PRESETS") or os.path.join(os.path.dirname(__file__), "data", "archs.json")
    try:
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
            if isinstance(data, dict) and data:
                return {k: v for k, v in data.items() if not k.startswith("__")}
    except (OSError, ValueError) as exc:
        logger.warning("could not read architecture presets from %s (%s); using defaults", path, exc)
    return dict(DEFAULT_ARCH_PRESETS)


ARCH_PRESETS: Dict[str, dict] = _load_arch_presets_from_json()


def arch_from_preset(name: str, **overrides) -> ArchConfig:
    try:
        base = dict(ARCH_PRESETS[name])
    except KeyError:
        raise InvalidConfig(f"unknown architecture preset {name!r} (known: {sorted(ARCH_PRESETS)})") from None
    base.update({k: v for k, v in overrides.items() if v is not None})
    return ArchConfig.from_dict(base)


# ------------------------------
# Planning
# ------------------------------
def round_to_multiple(value: float, multiple: int) -> int:
    return max(multiple, int(value / multiple + 0.5) * multiple)


@dataclass(frozen=True)
class UnitPlan:
    name: str
    spec: ConvSpec
    prelu: bool


@dataclass(frozen=True)
class BlockPlan:
    name: str
    units: Tuple[UnitPlan, ...]
    residual: bool = False


def _validate(arch: ArchConfig) -> None:
    h, w = arch.input_size
    if min(h, w, arch.embedding_dim, arch.channel_round) <= 0 or not arch.width_mult > 0:
        raise InvalidConfig(f"non-positive dimension in {arch}")
    if not arch.stage_table:
        raise InvalidConfig("stage table is empty")
    if arch.stage_repeats is not None and arch.stage_repeats <= 0:
        raise InvalidConfig("stage_repeats must be positive")
    ov = arch.per_stage_channel_override
    if ov is not None and len(ov) != len(arch.stage_table):
        raise InvalidConfig(f"channel override has {len(ov)} entries for {len(arch.stage_table)} stages")
    for i, st in enumerate(arch.stage_table):
        if st.kind not in STAGE_KINDS:
            raise InvalidConfig(f"stage {i}: unknown kind {st.kind!r}")
        if min(st.t, st.n, st.s) <= 0 or (st.kernel is not None and st.kernel <= 0):
            raise InvalidConfig(f"stage {i}: non-positive t/n/s/kernel in {st}")
        if st.kind in ("conv", "bottleneck") and st.c <= 0:
            raise InvalidConfig(f"stage {i}: {st.kind} needs a positive channel count")
        if ov is not None and ov[i] is not None:
            if st.kind in ("gdconv", "linear_conv"):
                raise InvalidConfig(f"stage {i}: {st.kind} channels cannot be overridden")
            if int(ov[i]) <= 0:
                raise InvalidConfig(f"stage {i}: override must be positive")


def _stage_channels(arch: ArchConfig, index: int) -> int:
    ov = arch.per_stage_channel_override
    if ov is not None and ov[index] is not None:
        return int(ov[index])
    return round_to_multiple(arch.stage_table[index].c * arch.width_mult, arch.channel_round)


def plan_blocks(arch: ArchConfig) -> Tuple[List[BlockPlan], int, Tuple[int, int]]:
    """Resolve the stage table into blocks; returns (blocks, out_channels, out_hw)."""
    _validate(arch)
    cin = 3
    h, w = arch.input_size
    blocks: List[BlockPlan] = []

    def advance(spec: ConvSpec) -> None:
        nonlocal h, w
        h, w = spec.output_hw(h, w)
        if h <= 0 or w <= 0:
            raise InvalidConfig(f"stage table reduces {arch.input_size} below 1x1 at {spec}")

    for i, st in enumerate(arch.stage_table):
        tag = f"s{i}_{st.kind}"
        repeats = st.n if arch.stage_repeats is None else min(st.n, arch.stage_repeats)
        if st.kind == "conv":
            k = st.kernel or 3
            cout = _stage_channels(arch, i)
            for r in range(repeats):
                spec = ConvSpec(cin, cout, (k, k), stride=st.s if r == 0 else 1, padding=k // 2)
                advance(spec)
                blocks.append(BlockPlan(f"{tag}.{r}", (UnitPlan("conv", spec, True),)))
                cin = cout
        elif st.kind == "dwconv":
            k = st.kernel or 3
            if st.c and _stage_channels(arch, i) != cin:
                raise InvalidConfig(f"stage {i}: depthwise conv cannot change channels ({cin} -> {_stage_channels(arch, i)})")
            for r in range(repeats):
                spec = ConvSpec(cin, cin, (k, k), stride=st.s if r == 0 else 1, padding=k // 2, groups=cin)
                advance(spec)
                blocks.append(BlockPlan(f"{tag}.{r}", (UnitPlan("conv", spec, True),)))
        elif st.kind == "bottleneck":
            cout = _stage_channels(arch, i)
            for r in range(repeats):
                stride = st.s if r == 0 else 1
                hidden = cin * st.t
                dw = ConvSpec(hidden, hidden, (3, 3), stride=stride, padding=1, groups=hidden)
                units = (
                    UnitPlan("expand", ConvSpec(cin, hidden, (1, 1)), True),
                    UnitPlan("dw", dw, True),
                    UnitPlan("project", ConvSpec(hidden, cout, (1, 1)), False),
                )
                advance(dw)
                blocks.append(BlockPlan(f"{tag}.{r}", units, residual=(stride == 1 and cin == cout)))
                cin = cout
        elif st.kind == "gdconv":
            if st.kernel is not None and (st.kernel, st.kernel) != (h, w):
                raise InvalidConfig(
                    f"stage {i}: strides reduce {arch.input_size} to {h}x{w}, not the gdconv kernel {st.kernel}"
                )
            spec = ConvSpec(cin, cin, (h, w), stride=1, padding=0, groups=cin)
            advance(spec)
            blocks.append(BlockPlan(tag, (UnitPlan("conv", spec, False),)))
        else:
            spec = ConvSpec(cin, arch.embedding_dim, (1, 1))
            advance(spec)
            blocks.append(BlockPlan(tag, (UnitPlan("conv", spec, False),)))
            cin = arch.embedding_dim

    if (h, w) != (1, 1) or cin != arch.embedding_dim:
        raise InvalidConfig(
            f"stage table must end in a 1x1 map with {arch.embedding_dim} channels, got {cin}x{h}x{w}"
        )
    return blocks, cin, (h, w)


# ------------------------------
# Model
# ------------------------------
class ConvUnit:
    """conv -> batch norm -> optional PReLU."""

    def __init__(self, conv: Conv2d, bn: BatchNorm2d, act: Optional[PReLU]):
        self.conv = conv
        self.bn = bn
        self.act = act

    def layers(self) -> Iterator[Tuple[str, object]]:
        yield "conv", self.conv
        yield "bn", self.bn
        if self.act is not None:
            yield "prelu", self.act

    def forward(self, x: np.ndarray, mode: str) -> np.ndarray:
        for _, layer in self.layers():
            x = layer.forward(x, mode)
        return x

    def backward(self, dout: np.ndarray) -> np.ndarray:
        for _, layer in reversed(list(self.layers())):
            dout = layer.backward(dout)
        return dout


class Block:
    def __init__(self, name: str, units: Sequence[Tuple[str, ConvUnit]], residual: bool = False):
        self.name = name
        self.units = list(units)
        self.residual = residual

    def forward(self, x: np.ndarray, mode: str) -> np.ndarray:
        out = x
        for _, unit in self.units:
            out = unit.forward(out, mode)
        return out + x if self.residual else out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        d = dout
        for _, unit in reversed(self.units):
            d = unit.backward(d)
        return d + dout if self.residual else d


class Model:
    def __init__(self, blocks: Sequence[Block], arch: ArchConfig):
        self.blocks = list(blocks)
        self.arch = arch

    @classmethod
    def empty(cls, arch: Optional[ArchConfig] = None) -> "Model":
        return cls([], arch or ArchConfig(stage_table=[]))

    def _walk(self) -> Iterator[Tuple[str, object]]:
        for block in self.blocks:
            for uname, unit in block.units:
                for lname, layer in unit.layers():
                    yield f"{block.name}.{uname}.{lname}", layer

    def named_params(self) -> Dict[str, np.ndarray]:
        return {f"{p}.{k}": v for p, layer in self._walk() for k, v in layer.params().items()}

    def named_grads(self) -> Dict[str, np.ndarray]:
        return {f"{p}.{k}": v for p, layer in self._walk() for k, v in layer.grads().items()}

    def named_buffers(self) -> Dict[str, np.ndarray]:
        return {f"{p}.{k}": v for p, layer in self._walk() for k, v in layer.buffers().items()}

    def conv_layers(self) -> Dict[str, Conv2d]:
        return {p: layer for p, layer in self._walk() if isinstance(layer, Conv2d)}

    def set_update_stats(self, flag: bool) -> None:
        for _, layer in self._walk():
            if isinstance(layer, BatchNorm2d):
                layer.update_stats = flag

    def astype(self, dtype) -> "Model":
        for _, layer in self._walk():
            layer.astype(dtype)
        return self

    def forward(self, x: np.ndarray, mode: str = TRAIN) -> np.ndarray:
        for block in self.blocks:
            x = block.forward(x, mode)
        return x.reshape(x.shape[0], -1)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        d = dout.reshape(dout.shape[0], -1, 1, 1)
        for block in reversed(self.blocks):
            d = block.backward(d)
        return d


def _make_unit(plan: UnitPlan, rng: np.random.Generator, dtype) -> ConvUnit:
    spec = plan.spec
    conv = Conv2d(spec, init_conv_weight(spec, rng, dtype))
    bn = BatchNorm2d(BatchNormState.create(spec.out_channels, dtype))
    act = PReLU(PReLUState.create(spec.out_channels, dtype)) if plan.prelu else None
    return ConvUnit(conv, bn, act)


def build_model(config: ArchConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Build and initialize a model; identical seeds give bitwise-identical weights."""
    plans, _, _ = plan_blocks(config)
    rng = np.random.default_rng(seed)
    blocks = [
        Block(bp.name, [(up.name, _make_unit(up, rng, dtype)) for up in bp.units], bp.residual)
        for bp in plans
    ]
    model = Model(blocks, config)
    logger.debug("built model: %d blocks, %d params", len(blocks), count_params(model))
    return model


# ------------------------------
# Static costs
# ------------------------------
def count_params(model: Model) -> int:
    """Learnable scalars: conv weights, BN scale/shift, PReLU slopes (running stats excluded)."""
    return int(sum(p.size for p in model.named_params().values()))


def count_flops(model: Model, input_size: Optional[Tuple[int, int]] = None) -> int:
    """Per-sample FLOPs with 1 multiply-accumulate = 2 FLOPs; residual adds are not counted."""
    h, w = input_size or model.arch.input_size
    c = 3
    total = 0
    for block in model.blocks:
        for _, unit in block.units:
            for _, layer in unit.layers():
                f, (c, h, w) = layer.flops(c, h, w)
                total += f
    return int(total)


def model_size_mb(model: Model) -> float:
    return count_params(model) * BYTES_PER_PARAM / 2 ** 20


def param_category(params: int) -> str:
    """Efficiency bracket used for submissions: '<2M', '2-5M' or '>5M'."""
    if params < 2_000_000:
        return "<2M"
    if params <= 5_000_000:
        return "2-5M"
    return ">5M"


@dataclass(frozen=True)
class LayerRow:
    name: str
    kind: str
    in_channels: int
    out_channels: int
    kernel: Tuple[int, int]
    stride: int
    groups: int
    in_hw: Tuple[int, int]
    out_hw: Tuple[int, int]
    params: int
    flops: int


def layer_table(arch: ArchConfig) -> List[LayerRow]:
    """Analytic per-unit table; params and FLOPs include the unit's BN and PReLU."""
    plans, _, _ = plan_blocks(arch)
    h, w = arch.input_size
    rows: List[LayerRow] = []
    for bp in plans:
        for up in bp.units:
            s = up.spec
            ho, wo = s.output_hw(h, w)
            cin_g = s.in_channels // s.groups
            kh, kw = s.kernel
            params = kh * kw * cin_g * s.out_channels + 2 * s.out_channels + (s.out_channels if up.prelu else 0)
            flops = 2 * kh * kw * cin_g * s.out_channels * ho * wo + 2 * s.out_channels * ho * wo
            if up.prelu:
                flops += s.out_channels * ho * wo
            kind = "depthwise" if s.groups > 1 else ("pointwise" if s.kernel == (1, 1) else "conv")
            rows.append(
                LayerRow(f"{bp.name}.{up.name}", kind, s.in_channels, s.out_channels, s.kernel, s.stride,
                         s.groups, (h, w), (ho, wo), params, flops)
            )
            h, w = ho, wo
    return rows


def embed(model: Model, batch: np.ndarray, mode: str = INFER) -> np.ndarray:
    """Embeddings (N, embedding_dim); L2-normalized in infer mode, raw in train mode."""
    h, w = model.arch.input_size
    if batch.ndim != 4 or batch.shape[1:] != (3, h, w):
        raise ShapeMismatch(f"expected a (N, 3, {h}, {w}) batch, got {batch.shape}")
    out = model.forward(batch, mode)
    return l2_normalize(out) if mode == INFER else out


def model_grad_case(arch: ArchConfig, batch: int = 4, seed: int = 0):
    """GradCase factory for an end-to-end float64 check of a whole model."""

    def factory(input_shapes, rng):
        model = build_model(arch, seed=seed, dtype=np.float64)
        model.set_update_stats(False)
        h, w = arch.input_size
        x = rng.standard_normal((batch, 3, h, w))
        params = model.named_params()

        def forward():
            return model.forward(x, TRAIN)

        def backward(dout):
            model.forward(x, TRAIN)
            dx = model.backward(dout)
            return [dx], {k: g.copy() for k, g in model.named_grads().items()}

        return GradCase("model", [x], params, forward, backward)

    return factory
