"""Budget-matched aggregation variants for the architecture ablations.

All variants share a stem (C3-B), ``stages`` stages of ``depth`` units with
stride-2 entry units after the first stage, and a BN-ReLU / global pool /
linear head. A unit is one aggregation step:

* plain       x' = H(x)
* highway     x' = pad(x) * R(x) + H(x) * T(x), sigmoid 1x1-conv gates
* residual    x' = pad(x) + H(x)
* dense       x' = H([x_0, ..., x_{k-1}]) appended to the stage's concat
* inception   x' = [1x1(x), 3x3(x), 3x3(3x3(x))]
* micro-dense one micro-dense block (MDConv-n)

H is a C3-BR. Unit widths follow floor(W0 + k*alpha/L) except for dense,
whose width is set by the growth rate. Two integer knobs per family are
tuned so the total parameter count lands within a tolerance of a budget.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .autograd import Parameter, Tensor
from .layers import (
    BatchNorm2d,
    ConvBN,
    ConvSpec,
    Linear,
    Module,
    avg_pool_stride2,
    concat_channels,
    conv2d,
    global_avg_pool,
    relu,
    residual_add_zero_pad,
    sigmoid,
    zero_pad_channels,
)
from .network import NetworkInstance, build_network
from .planner import ArchConfig, DEFAULT_RA, plan_network, pyramid_widths

KINDS = ("plain", "highway", "residual", "dense", "inception", "micro-dense")
BUDGET_TOLERANCE = 0.02


class BudgetError(ValueError):
    def __init__(self, budget: int, nearest: int, spec=None):
        self.budget = budget
        self.nearest = nearest
        self.spec = spec
        super().__init__(f"parameter budget {budget} unreachable within ±{BUDGET_TOLERANCE:.0%}; "
                         f"nearest achievable count is {nearest}")


@dataclass
class AblationSpec:
    kind: str = "micro-dense"
    depth: int = 1  # units per stage
    stages: int = 3
    W0: int = 16
    alpha: int = 16
    growth: int = 12  # dense only
    n: int = 3  # micro-dense only
    fixed_growth: bool = False  # micro-dense only
    ra: float = DEFAULT_RA
    num_classes: int = 10
    in_channels: int = 3
    resolution: int = 16

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown aggregation kind {self.kind!r}; choose from {KINDS}")
        if self.depth < 1 or self.stages < 1:
            raise ValueError("depth and stages must be >= 1")
        if self.W0 < 1:
            raise ValueError("W0 must be >= 1")

    @property
    def units(self) -> int:
        return self.depth * self.stages

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AblationSpec":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def arch_config(self) -> ArchConfig:
        return ArchConfig(W0=self.W0, alpha=self.alpha, N=self.units, n=self.n, ra=self.ra,
                          stages=[self.depth] * self.stages, num_classes=self.num_classes,
                          resolution=self.resolution, in_channels=self.in_channels,
                          fixed_growth=self.fixed_growth)


def _c3(c_in, c_out, stride, rng, dtype, relu_=True):
    return ConvBN(ConvSpec(c_in, c_out, 3, stride, 1), rng, relu=relu_, dtype=dtype)


def _c1(c_in, c_out, stride, rng, dtype):
    return ConvBN(ConvSpec(c_in, c_out, 1, stride, 0), rng, dtype=dtype)


class PlainUnit(Module):
    def __init__(self, c_in, c_out, stride, rng, dtype):
        super().__init__()
        self.h = _c3(c_in, c_out, stride, rng, dtype)

    def forward(self, x):
        return self.h(x)


class ResidualUnit(Module):
    def __init__(self, c_in, c_out, stride, rng, dtype):
        super().__init__()
        self.stride = stride
        self.c_out = c_out
        self.h = _c3(c_in, c_out, stride, rng, dtype)

    def shortcut(self, x):
        s = avg_pool_stride2(x) if self.stride == 2 else x
        return s

    def forward(self, x):
        return residual_add_zero_pad(self.shortcut(x), self.h(x))


class HighwayUnit(ResidualUnit):
    CARRY_BIAS = -1.0

    def __init__(self, c_in, c_out, stride, rng, dtype):
        super().__init__(c_in, c_out, stride, rng, dtype)
        self.gate_spec = ConvSpec(c_in, c_out, 1, 1, 0, bias=True)
        fan = np.sqrt(2.0 / c_in)
        self.carry_w = Parameter((rng.standard_normal(self.gate_spec.weight_shape) * fan).astype(dtype))
        self.carry_b = Parameter(np.full(c_out, self.CARRY_BIAS, dtype=dtype), decay_exempt=True)
        self.transform_w = Parameter((rng.standard_normal(self.gate_spec.weight_shape) * fan).astype(dtype))
        self.transform_b = Parameter(np.zeros(c_out, dtype=dtype), decay_exempt=True)

    def forward(self, x):
        s = self.shortcut(x)
        carry = sigmoid(conv2d(s, self.gate_spec, self.carry_w, self.carry_b))
        transform = sigmoid(conv2d(s, self.gate_spec, self.transform_w, self.transform_b))
        return zero_pad_channels(s, self.c_out) * carry + self.h(x) * transform


class InceptionUnit(Module):
    def __init__(self, c_in, c_out, stride, rng, dtype):
        super().__init__()
        a = c_out // 3
        b = c_out // 3
        c = c_out - a - b
        self.widths = (a, b, c)
        self.b1 = _c1(c_in, a, stride, rng, dtype)
        self.b3 = _c3(c_in, b, stride, rng, dtype)
        self.b5a = _c3(c_in, c, stride, rng, dtype)
        self.b5b = _c3(c, c, 1, rng, dtype)

    def forward(self, x):
        return concat_channels([self.b1(x), self.b3(x), self.b5b(self.b5a(x))])


class DenseStage(Module):
    """``depth`` C3-BR layers, each reading the concat of all earlier outputs."""

    def __init__(self, c_in, growth, depth, rng, dtype):
        super().__init__()
        self.layers = []
        for j in range(depth):
            self.layers.append(self.add_module(f"layer{j + 1}", _c3(c_in + j * growth, growth, 1, rng, dtype)))
        self.out_channels = c_in + depth * growth

    def layer_inputs(self) -> list[int]:
        return [l.spec.in_channels for l in self.layers]

    def forward(self, x):
        feats = [x]
        for layer in self.layers:
            feats.append(layer(concat_channels(feats)))
        return concat_channels(feats)


class Transition(Module):
    def __init__(self, c_in, c_out, rng, dtype):
        super().__init__()
        self.conv = _c1(c_in, c_out, 1, rng, dtype)

    def forward(self, x):
        return avg_pool_stride2(self.conv(x))


_UNITS = {"plain": PlainUnit, "residual": ResidualUnit, "highway": HighwayUnit, "inception": InceptionUnit}


class AggregationNet(Module):
    def __init__(self, spec: AblationSpec, rng, dtype):
        super().__init__()
        self.spec = spec
        self.stem = _c3(spec.in_channels, spec.W0, 1, rng, dtype, relu_=False)
        self.units = []
        if spec.kind == "dense":
            c = spec.W0
            for s in range(spec.stages):
                if s > 0:
                    t = self.add_module(f"transition{s}", Transition(c, max(1, c // 2), rng, dtype))
                    self.units.append(t)
                    c = max(1, c // 2)
                stage = self.add_module(f"stage{s + 1}", DenseStage(c, spec.growth, spec.depth, rng, dtype))
                self.units.append(stage)
                c = stage.out_channels
            width = c
        else:
            widths = pyramid_widths(spec.W0, spec.alpha, spec.units)
            cls = _UNITS[spec.kind]
            for k in range(spec.units):
                stride = 2 if (k % spec.depth == 0 and k > 0) else 1
                self.units.append(self.add_module(f"unit{k}", cls(widths[k], widths[k + 1], stride, rng, dtype)))
            width = widths[-1]
        self.head_bn = BatchNorm2d(width, dtype)
        self.fc = Linear(width, spec.num_classes, rng, dtype)

    def forward(self, x):
        h = self.stem(x)
        for unit in self.units:
            h = unit(h)
        return self.fc(global_avg_pool(relu(self.head_bn(h))))


def build_ablation_network(spec: AblationSpec, seed: int = 0, dtype=np.float64) -> NetworkInstance:
    if spec.kind == "micro-dense":
        net = build_network(spec.arch_config(), seed=seed, dtype=dtype)
        net.config = spec
        net.kind = "ablation"
        return net
    module = AggregationNet(spec, np.random.default_rng(seed), dtype)
    return NetworkInstance(module, spec, "ablation", None, dtype)


def count_ablation_params(spec: AblationSpec) -> int:
    if spec.kind == "micro-dense":
        return plan_network(spec.arch_config()).total_params
    module = AggregationNet(spec, np.random.default_rng(0), np.float32)
    return module.num_parameters()


# ---------------------------------------------------------------- budget matching


def _knob_names(spec: AblationSpec) -> tuple[str, str]:
    return ("W0", "growth") if spec.kind == "dense" else ("W0", "alpha")


def _try_count(spec: AblationSpec) -> Optional[int]:
    try:
        return count_ablation_params(spec)
    except ValueError:
        return None


def match_budget(base: AblationSpec, budget: int, tol: float = BUDGET_TOLERANCE) -> AblationSpec:
    """Scale the width knobs of ``base`` until its size is within ``tol`` of budget.

    A width multiplier m maps to knobs (round(m*W0), round(m*second)); m is
    bisected to the budget crossing, then the integer knob lattice around the
    crossing is scanned. Ties go to the smaller model.
    """
    k1, k2 = _knob_names(base)
    b1, b2 = max(getattr(base, k1), 1), max(getattr(base, k2), 1)

    def at(m: float) -> AblationSpec:
        return replace(base, **{k1: max(1, round(m * b1)), k2: max(0, round(m * b2))})

    lo, hi = 0.05, 1.0
    while (_try_count(at(hi)) or 0) < budget:
        hi *= 2
        if hi > 256:
            raise BudgetError(budget, _try_count(at(hi / 2)) or 0)
    for _ in range(40):
        mid = (lo + hi) / 2
        c = _try_count(at(mid))
        if c is None or c < budget:
            lo = mid
        else:
            hi = mid
    centre = at(hi)
    c1, c2 = getattr(centre, k1), getattr(centre, k2)
    candidates = []
    for d1 in range(-4, 5):
        for d2 in range(-24, 25):
            v1, v2 = c1 + d1, c2 + d2
            if v1 < 1 or v2 < 0:
                continue
            s = replace(base, **{k1: v1, k2: v2})
            c = _try_count(s)
            if c is not None:
                candidates.append((abs(c - budget), c, v1, v2, s))
    if not candidates:
        raise BudgetError(budget, 0)
    candidates.sort(key=lambda t: (t[0], t[1], t[2], t[3]))
    err, count, _, _, best = candidates[0]
    if err > tol * budget:
        raise BudgetError(budget, count, best)
    return best


def build_ablation_variant(kind: str, budget: int, seed: int = 0, dtype=np.float64,
                           **overrides) -> NetworkInstance:
    spec = match_budget(AblationSpec(kind=kind, **overrides), budget)
    return build_ablation_network(spec, seed=seed, dtype=dtype)


def dense_depth_sweep(n_values, budget: int, seed: int = 0, dtype=np.float64,
                      **overrides) -> dict[int, NetworkInstance]:
    """One budget-matched micro-dense net per dense-layer count n."""
    out = {}
    for n in n_values:
        spec = match_budget(AblationSpec(kind="micro-dense", n=n, **overrides), budget)
        out[n] = build_ablation_network(spec, seed=seed, dtype=dtype)
    return out


def fixed_vs_pyramidal_variant(fixed: bool, budget: int, seed: int = 0, dtype=np.float64,
                               **overrides) -> NetworkInstance:
    spec = match_budget(AblationSpec(kind="micro-dense", fixed_growth=fixed, **overrides), budget)
    return build_ablation_network(spec, seed=seed, dtype=dtype)


# ---------------------------------------------------------------- runner


ABLATIONS = {
    "depth-sweep": [("n=1", {"n": 1}), ("n=2", {"n": 2}), ("n=3", {"n": 3}), ("n=4", {"n": 4})],
    "growth-mode": [("pyramidal", {"fixed_growth": False}), ("fixed", {"fixed_growth": True})],
    "aggregation": [(k, {"kind": k}) for k in KINDS],
}


def run_ablation(ablation: str, budget: int, train_data, test_data, train_config, seeds=(0,),
                 out_dir=None, **overrides) -> list[dict]:
    """Train every variant of one ablation for each seed; one row per (variant, seed)."""
    from .trainer import evaluate, train

    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}; choose from {sorted(ABLATIONS)}")
    rows = []
    for label, delta in ABLATIONS[ablation]:
        params = dict(overrides)
        params.setdefault("kind", "micro-dense")
        params.update(delta)
        params.setdefault("num_classes", train_data.num_classes)
        params.setdefault("resolution", train_data.images.shape[-1])
        spec = match_budget(AblationSpec(**params), budget)
        for seed in seeds:
            net = build_ablation_network(spec, seed=seed, dtype=train_config.dtype)
            cfg = replace(train_config, seed=seed)
            train(net, train_data, cfg)
            acc, loss = evaluate(net, test_data)
            train_acc, _ = evaluate(net, train_data)
            rows.append({"variant": label, "seed": seed, "params": net.num_parameters(),
                         "test_acc": acc, "test_loss": loss, "train_acc": train_acc,
                         "spec": spec})
    if out_dir is not None:
        write_ablation_csv(Path(out_dir) / f"ablation_{ablation}_runs.csv", rows)
        write_summary_csv(Path(out_dir) / f"ablation_{ablation}.csv", rows)
    return rows


def write_ablation_csv(path, rows: list[dict]) -> None:
    keys = ["variant", "seed", "params", "test_acc", "test_loss", "train_acc", "spec"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(keys)
        for r in rows:
            w.writerow([json.dumps(r["spec"].to_dict()) if k == "spec" else r[k] for k in keys])


def write_summary_csv(path, rows: list[dict]) -> None:
    """One row per variant: mean/std test accuracy over seeds."""
    by_variant: dict[str, list[dict]] = {}
    for r in rows:
        by_variant.setdefault(r["variant"], []).append(r)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "params", "seeds", "mean_test_acc", "std_test_acc", "mean_train_acc", "spec"])
        for label, rs in by_variant.items():
            accs = [r["test_acc"] for r in rs]
            w.writerow([label, rs[0]["params"], len(rs), float(np.mean(accs)), float(np.std(accs)),
                        float(np.mean([r["train_acc"] for r in rs])), json.dumps(rs[0]["spec"].to_dict())])


def summarize(rows: list[dict]) -> dict[str, float]:
    """Mean test accuracy per variant, in first-seen order."""
    acc: dict[str, list[float]] = {}
    for r in rows:
        acc.setdefault(r["variant"], []).append(r["test_acc"])
    return {k: float(np.mean(v)) for k, v in acc.items()}
