"""Materialize planner output into executable micro-dense networks."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .autograd import Parameter, ShapeError, Tensor, no_grad
from .layers import (
    BatchNorm2d,
    ConvBN,
    Linear,
    Module,
    avg_pool_stride2,
    concat_channels,
    global_avg_pool,
    relu,
    residual_add_zero_pad,
)
from .planner import ArchConfig, BlockPlan, LayerPlan, NetworkPlan, plan_network


class PlanMismatchError(ShapeError):
    pass


def _convbn_from_plan(lp: LayerPlan, rng, dtype) -> ConvBN:
    return ConvBN(lp.conv_spec(), rng, relu=lp.relu, dtype=dtype)


def _run(layer_plan: LayerPlan, fn: Callable, x: Tensor) -> Tensor:
    try:
        return fn(x)
    except ShapeError as e:
        raise PlanMismatchError(f"{layer_plan.name} [{layer_plan.source}]", e.expected, e.actual) from e


class MicroDenseBlock(Module):
    """Local dense aggregation wrapped in a zero-padded identity shortcut."""

    def __init__(self, plan: BlockPlan, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.plan = plan
        self.bn_in = BatchNorm2d(plan.in_channels, dtype)
        self.compress = _convbn_from_plan(plan.layer("compress"), rng, dtype)
        self.dense = []
        for j in range(1, plan.n + 1):
            layer = Module()
            layer.conv1 = _convbn_from_plan(plan.layer(f"dense{j}.conv1"), rng, dtype)
            layer.conv3 = _convbn_from_plan(plan.layer(f"dense{j}.conv3"), rng, dtype)
            self.add_module(f"dense{j}", layer)
            self.dense.append(layer)
        self.output = _convbn_from_plan(plan.layer("output"), rng, dtype)

    def features(self, x: Tensor) -> list[Tensor]:
        """Compression output followed by every dense-layer output."""
        p = self.plan
        h = _run(p.layers[0], self.bn_in, x)
        feats = [_run(p.layer("compress"), self.compress, h)]
        for j, layer in enumerate(self.dense, start=1):
            t = _run(p.layer(f"dense{j}.conv1"), layer.conv1, concat_channels(feats))
            feats.append(_run(p.layer(f"dense{j}.conv3"), layer.conv3, t))
        return feats

    def forward(self, x: Tensor) -> Tensor:
        feats = self.features(x)
        y = _run(self.plan.layer("output"), self.output, concat_channels(feats))
        shortcut = avg_pool_stride2(x) if self.plan.downsample else x
        return residual_add_zero_pad(shortcut, y)


def build_block(plan: BlockPlan, rng: Optional[np.random.Generator] = None,
                dtype=np.float64) -> MicroDenseBlock:
    """Module computing one planned micro-dense block (callable Tensor -> Tensor)."""
    block = MicroDenseBlock(plan, rng or np.random.default_rng(0), dtype)
    block.name_parameters()
    return block


class MicroDenseNet(Module):
    def __init__(self, plan: NetworkPlan, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.plan = plan
        self.stem = _convbn_from_plan(plan.stem, rng, dtype)
        self.blocks = []
        for b in plan.blocks:
            self.blocks.append(self.add_module(f"block{b.index}", MicroDenseBlock(b, rng, dtype)))
        head_bn, _, fc = plan.head
        self.head_bn = BatchNorm2d(head_bn.in_channels, dtype)
        self.fc = Linear(fc.in_channels, fc.out_channels, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = _run(self.plan.stem, self.stem, x)
        for block in self.blocks:
            h = block(h)
        h = relu(self.head_bn(h))
        return self.fc(global_avg_pool(h))


class NetworkInstance:
    """A built network: module tree, named parameter store, plan and mode."""

    def __init__(self, module: Module, config, kind: str = "micro-dense", plan=None, dtype=np.float64):
        self.module = module
        self.config = config
        self.kind = kind
        self.plan = plan
        self.dtype = np.dtype(dtype)
        module.name_parameters()
        self.params: dict[str, Parameter] = dict(module.named_parameters())
        if len(self.params) != len(module.parameters()):
            raise ValueError("duplicate parameter names")
        self.train()

    def __call__(self, x) -> Tensor:
        return self.forward(x)

    def forward(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        elif x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        return self.module(x)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def buffers(self) -> dict[str, np.ndarray]:
        return {name: getattr(owner.state, attr) for name, owner, attr in self.module.named_buffers()}

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        for n, owner, attr in self.module.named_buffers():
            if n == name:
                setattr(owner.state, attr, np.array(value, dtype=self.dtype))
                return
        raise KeyError(name)

    def train(self) -> "NetworkInstance":
        self.module.train(True)
        self.mode = "train"
        return self

    def eval(self) -> "NetworkInstance":
        self.module.train(False)
        self.mode = "eval"
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Logits for a stack of images, in eval mode, without building gradients."""
        prev = self.mode
        self.eval()
        out = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                out.append(self.forward(images[start : start + batch_size]).data)
        if prev == "train":
            self.train()
        return np.concatenate(out, axis=0)


def build_network(config: ArchConfig, seed: int = 0, dtype=np.float64,
                  plan: Optional[NetworkPlan] = None) -> NetworkInstance:
    """Stem C3-B -> planned micro-dense blocks -> BN-ReLU -> GAP -> linear."""
    plan = plan or plan_network(config)
    rng = np.random.default_rng(seed)
    return NetworkInstance(MicroDenseNet(plan, rng, dtype), config, "micro-dense", plan, dtype)


def zero_block_weights(block: Module) -> None:
    """Zero every conv weight inside a block (its residual branch becomes 0)."""
    for name, p in block.named_parameters():
        if name.endswith("conv.weight"):
            p.data[...] = 0.0


def allocated_by_layer(net: NetworkInstance) -> dict[str, int]:
    """Parameter elements actually allocated for each planned layer row.

    Keys follow the plan: ``stem``, ``block{k}/{row}``, ``head.bn``, ``head.fc``.
    """
    m = net.module
    counts = {"stem": m.stem.num_parameters(), "head.bn": m.head_bn.num_parameters(),
              "head.fc": m.fc.num_parameters(), "head.pool": 0}
    for b in m.blocks:
        for lp in b.plan.layers:
            mod = b
            for part in lp.name.split("."):
                mod = getattr(mod, part, None)
                if mod is None:
                    break
            counts[f"block{b.plan.index}/{lp.name}"] = 0 if mod is None else mod.num_parameters()
    return counts


def planned_by_layer(plan: NetworkPlan) -> dict[str, int]:
    counts = {"stem": plan.stem.param_count}
    for b in plan.blocks:
        for lp in b.layers:
            counts[f"block{b.index}/{lp.name}"] = lp.param_count
    counts.update({lp.name: lp.param_count for lp in plan.head})
    return counts
