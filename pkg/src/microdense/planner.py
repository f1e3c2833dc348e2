"""Architecture planner: exact channel, cardinality, parameter and FLOP plans.

Everything here is integer (or exact rational) arithmetic over plain
dataclasses; nothing touches the tensor engine. The builder in
:mod:`microdense.network` materializes these plans, and the test-suite checks
that the two agree element-for-element.

FLOP convention: a conv counts ``2 * H_out * W_out * c_u * (c_i/G) * kh * kw``
(one multiply and one add per MAC). The batch norm and ReLU fused into a
C-BR layer are not counted on top of the conv. Standalone layers count
2 per element (BN: scale + shift), 1 per element (ReLU), 1 per input element
(pooling) and ``2 * in * out`` (linear).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from typing import Optional, Sequence

from .layers import ConvSpec, count_params

# Compression ratio chosen so the 30a64 and 60a115 plans land near the
# published 0.7M / 4.0M totals (see README, "r_a calibration").
DEFAULT_RA = 0.207
DEFAULT_GC = 4


def _ratio(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


@dataclass
class ArchConfig:
    W0: int = 16
    alpha: int = 64
    N: int = 30
    n: int = 3
    gc: int = DEFAULT_GC
    ra: float = DEFAULT_RA
    stages: Optional[list[int]] = None
    num_classes: int = 10
    resolution: int = 32
    in_channels: int = 3
    fixed_growth: bool = False

    def __post_init__(self):
        if self.stages is None:
            if self.N % 3:
                raise ValueError(f"N={self.N} not divisible into 3 stages; pass stages explicitly")
            self.stages = [self.N // 3] * 3
        self.stages = [int(s) for s in self.stages]
        self.validate()

    def validate(self) -> None:
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.n < 1:
            raise ValueError("n (dense layers per block) must be >= 1")
        if self.gc < 1:
            raise ValueError("gc must be >= 1")
        if not (0 < _ratio(self.ra) <= 1):
            raise ValueError(f"ra must lie in (0, 1], got {self.ra}")
        if self.W0 < self.gc:
            raise ValueError(f"W0={self.W0} must be >= gc={self.gc}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if sum(self.stages) != self.N or any(s < 1 for s in self.stages):
            raise ValueError(f"stages {self.stages} must be positive and sum to N={self.N}")
        if self.resolution >> (len(self.stages) - 1) < 1:
            raise ValueError("resolution too small for the number of stages")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ArchConfig field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class LayerPlan:
    name: str
    kind: str  # C1-BR | C3-BR | C3-B | BN | BN-R | downsample-conv | pool | linear
    in_channels: int
    out_channels: int
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    groups: int = 1
    in_size: int = 0
    out_size: int = 0
    param_count: int = 0
    flop_count: int = 0
    source: str = ""

    @property
    def has_conv(self) -> bool:
        return self.kind in ("C1-BR", "C3-BR", "C3-B", "downsample-conv")

    @property
    def has_bn(self) -> bool:
        return self.kind != "pool" and self.kind != "linear"

    @property
    def relu(self) -> bool:
        return self.kind in ("C1-BR", "C3-BR", "downsample-conv", "BN-R")

    def conv_spec(self) -> ConvSpec:
        return ConvSpec(self.in_channels, self.out_channels, self.kernel,
                        self.stride, self.padding, self.groups, bias=False)


@dataclass
class BlockPlan:
    index: int
    in_channels: int
    out_channels: int
    n: int
    downsample: bool
    shortcut: str  # identity | zero-pad | downsample+zero-pad
    layers: list[LayerPlan] = field(default_factory=list)
    in_size: int = 0
    out_size: int = 0

    @property
    def params(self) -> int:
        return sum(l.param_count for l in self.layers)

    @property
    def flops(self) -> int:
        return sum(l.flop_count for l in self.layers)

    def layer(self, name: str) -> LayerPlan:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    @property
    def dense_widths(self) -> list[int]:
        return [self.layer(f"dense{j}.conv3").out_channels for j in range(1, self.n + 1)]


@dataclass
class NetworkPlan:
    config: ArchConfig
    stem: LayerPlan
    blocks: list[BlockPlan]
    head: list[LayerPlan]

    def all_layers(self) -> list[LayerPlan]:
        out = [self.stem]
        for b in self.blocks:
            out.extend(b.layers)
        out.extend(self.head)
        return out

    @property
    def total_params(self) -> int:
        return sum(l.param_count for l in self.all_layers())

    @property
    def total_flops(self) -> int:
        return sum(l.flop_count for l in self.all_layers())

    def to_json(self) -> str:
        doc = {
            "config": self.config.to_dict(),
            "stem": asdict(self.stem),
            "blocks": [
                {k: v for k, v in asdict(b).items()} for b in self.blocks
            ],
            "head": [asdict(l) for l in self.head],
            "total_params": self.total_params,
            "total_flops": self.total_flops,
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "NetworkPlan":
        doc = json.loads(text)
        blocks = []
        for b in doc["blocks"]:
            layers = [LayerPlan(**l) for l in b.pop("layers")]
            blocks.append(BlockPlan(layers=layers, **b))
        return cls(
            config=ArchConfig.from_dict(doc["config"]),
            stem=LayerPlan(**doc["stem"]),
            blocks=blocks,
            head=[LayerPlan(**l) for l in doc["head"]],
        )


# ---------------------------------------------------------------- growth calculus


def fixed_growth_channels(c0: int, r0: int, n: int) -> int:
    """Channels after n dense layers with a constant growth rate r0."""
    return c0 + n * r0


def increasing_growth_channels(c0: int, r0: int, r_hat: int, n: int) -> int:
    """Channels after n dense layers whose i-th rate is r0 + r_hat*(i-1)."""
    return c0 + n * r0 + r_hat * (n - 1) * n // 2


def linear_layer_width(l: int, c0: int) -> int:
    """Width (l+1)*c0 of the l-th dense layer under plain linear widening."""
    return (l + 1) * c0


def pyramid_widths(W0: int, alpha: int, N: int) -> list[int]:
    """Block output widths floor(W0 + k*alpha/N) for k = 0..N, computed exactly."""
    if N <= 0:
        raise ValueError("N must be >= 1")
    return [math.floor(W0 + Fraction(k * alpha, N)) for k in range(N + 1)]


def cardinality_schedule(n: int) -> list[int]:
    if n < 1:
        raise ValueError("n must be >= 1")
    return [j + 1 for j in range(1, n + 1)]


def compression_width(c_in: int, ra, gc: int) -> int:
    return math.floor(c_in * _ratio(ra)) * gc


# ---------------------------------------------------------------- flops


def conv_flops(spec: ConvSpec, out_h: int, out_w: int) -> int:
    kh, kw = spec.kernel
    return 2 * out_h * out_w * spec.out_channels * (spec.in_channels // spec.groups) * kh * kw


def flops(layer: LayerPlan, in_size: Optional[int] = None) -> int:
    """FLOPs of one planned layer on a square map of side ``in_size``."""
    s = layer.in_size if in_size is None else in_size
    if layer.has_conv:
        spec = layer.conv_spec()
        oh, ow = spec.output_size(s, s)
        return conv_flops(spec, oh, ow)
    if layer.kind in ("BN", "BN-R"):
        per = 3 if layer.relu else 2
        return per * layer.in_channels * s * s
    if layer.kind == "pool":
        return layer.in_channels * s * s
    if layer.kind == "linear":
        return 2 * layer.in_channels * layer.out_channels
    raise ValueError(f"unknown layer kind {layer.kind!r}")


def _conv_layer(name, kind, c_in, c_out, kernel, size, *, stride=1, groups=1, source="", bn=True):
    padding = {1: 0, 3: 1, 4: 1}[kernel]
    lp = LayerPlan(name, kind, c_in, c_out, kernel, stride, padding, groups, in_size=size, source=source)
    spec = lp.conv_spec()
    lp.out_size = spec.output_size(size, size)[0]
    lp.param_count = count_params(spec) + (2 * c_out if bn else 0)
    lp.flop_count = flops(lp)
    return lp


def _bn_layer(name, channels, size, relu, source):
    lp = LayerPlan(name, "BN-R" if relu else "BN", channels, channels, in_size=size, out_size=size,
                   param_count=2 * channels, source=source)
    lp.flop_count = flops(lp)
    return lp


# ---------------------------------------------------------------- blocks and networks


def plan_block(
    c_in: int,
    c_out: int,
    n: int,
    gc: int = DEFAULT_GC,
    ra=DEFAULT_RA,
    downsample: bool = False,
    *,
    spatial: int = 32,
    index: int = 0,
    fixed_growth: bool = False,
) -> BlockPlan:
    """Compile one micro-dense block into its layer rows.

    Rows: BN, compression C1-BR (c_in -> c0), then for j = 1..n a C1-BR over
    the concatenation of all earlier outputs followed by a grouped C3-BR with
    cardinality k_j, then the output C1-BR back to c_out. A downsampling
    block swaps the compression 1x1 for a 4x4 stride-2 conv.

    With ``fixed_growth`` every dense layer takes width c_1 and cardinality k_1.
    """
    if c_in < 1 or c_out < 1:
        raise ValueError("block widths must be >= 1")
    c0 = compression_width(c_in, ra, gc)
    if c0 < gc:
        raise ValueError(
            f"compression width floor({c_in}*{ra})*{gc} = {c0} < gc={gc}; "
            f"raise ra to at least {Fraction(1, c_in)} or widen the block input"
        )
    ks = cardinality_schedule(n)
    if fixed_growth:
        ks = [ks[0]] * n
    if downsample:
        shortcut = "downsample+zero-pad"
    elif c_out == c_in:
        shortcut = "identity"
    elif c_out > c_in:
        shortcut = "zero-pad"
    else:
        raise ValueError(f"block output {c_out} narrower than input {c_in}; zero-pad shortcut impossible")
    tag = f"block{index}"
    layers = [_bn_layer("bn_in", c_in, spatial, relu=False, source="block/compression/BatchNorm")]
    if downsample:
        comp = _conv_layer("compress", "downsample-conv", c_in, c0, 4, spatial, stride=2,
                           source="block/compression/4x4-stride2")
    else:
        comp = _conv_layer("compress", "C1-BR", c_in, c0, 1, spatial, source="block/compression/C1-BR")
    layers.append(comp)
    size = comp.out_size
    widths = [c0]
    for j, k in enumerate(ks, start=1):
        cj = (c0 // gc) * k
        layers.append(_conv_layer(f"dense{j}.conv1", "C1-BR", sum(widths), cj, 1, size,
                                  source=f"block/dense-{j}/C1-BR"))
        layers.append(_conv_layer(f"dense{j}.conv3", "C3-BR", cj, cj, 3, size, groups=k,
                                  source=f"block/dense-{j}/C3-BR"))
        widths.append(cj)
    layers.append(_conv_layer("output", "C1-BR", sum(widths), c_out, 1, size, source="block/output/C1-BR"))
    if downsample:
        pool = LayerPlan("shortcut_pool", "pool", c_in, c_in, kernel=2, stride=2, in_size=spatial,
                         out_size=spatial // 2, source="shortcut")
        pool.flop_count = flops(pool)
        layers.append(pool)
    return BlockPlan(index, c_in, c_out, n, downsample, shortcut, layers, spatial, size)


def plan_network(config: ArchConfig) -> NetworkPlan:
    config.validate()
    widths = pyramid_widths(config.W0, config.alpha, config.N)
    size = config.resolution
    stem = _conv_layer("stem", "C3-B", config.in_channels, config.W0, 3, size, source="net/stem/C3-B")
    first_of_stage = set()
    acc = 0
    for s in config.stages[:-1]:
        acc += s
        first_of_stage.add(acc)
    blocks = []
    for k in range(config.N):
        ds = k in first_of_stage
        b = plan_block(widths[k], widths[k + 1], config.n, config.gc, config.ra, ds,
                       spatial=size, index=k, fixed_growth=config.fixed_growth)
        size = b.out_size
        blocks.append(b)
    cN = widths[-1]
    head = [
        _bn_layer("head.bn", cN, size, relu=True, source="net/head/BN-ReLU"),
        LayerPlan("head.pool", "pool", cN, cN, kernel=size, stride=size, in_size=size, out_size=1,
                  source="net/head/global-avg-pool"),
        LayerPlan("head.fc", "linear", cN, config.num_classes, in_size=1, out_size=1,
                  param_count=cN * config.num_classes + config.num_classes,
                  source="net/head/linear"),
    ]
    for l in head[1:]:
        l.flop_count = flops(l)
    return NetworkPlan(config, stem, blocks, head)


def spatial_trace(plan: NetworkPlan) -> list[int]:
    """Resolution entering the stem and leaving each stage."""
    trace = [plan.stem.in_size]
    acc = 0
    for s in plan.config.stages:
        acc += s
        trace.append(plan.blocks[acc - 1].out_size)
    return trace


def format_plan(plan: NetworkPlan, block_trace: bool = True) -> str:
    """Human-readable table of every planned layer with totals."""
    header = f"{'layer':<28}{'kind':<17}{'c_in':>6}{'c_out':>6}{'k':>3}{'s':>3}{'G':>4}{'size':>6}{'params':>10}{'flops':>14}"
    lines = [header, "-" * len(header)]

    def row(prefix, l):
        lines.append(
            f"{prefix + l.name:<28}{l.kind:<17}{l.in_channels:>6}{l.out_channels:>6}{l.kernel:>3}"
            f"{l.stride:>3}{l.groups:>4}{l.out_size:>6}{l.param_count:>10}{l.flop_count:>14}"
        )

    row("", plan.stem)
    for b in plan.blocks:
        lines.append(
            f"== block {b.index}: {b.in_channels} -> {b.out_channels}, MDConv-{b.n}, "
            f"shortcut={b.shortcut}, params={b.params}, flops={b.flops}"
        )
        if block_trace:
            for l in b.layers:
                row("  ", l)
    for l in plan.head:
        row("", l)
    lines.append(f"TOTAL params={plan.total_params} ({plan.total_params / 1e6:.3f}M) flops={plan.total_flops}")
    return "\n".join(lines)
