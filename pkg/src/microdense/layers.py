"""Differentiable layer primitives and the small module system built on them.

Functional ops take and return :class:`~microdense.autograd.Tensor`. Modules
(:class:`Conv2d`, :class:`BatchNorm2d`, :class:`ConvBN`, :class:`Linear`)
own their :class:`~microdense.autograd.Parameter` objects and call the
functional ops.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import Parameter, ShapeError, Tensor, make_node

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 0
    groups: int = 1
    bias: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        if self.groups < 1:
            raise ValueError(f"groups must be >= 1, got {self.groups}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid stride/padding {self.stride}/{self.padding}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"channels ({self.in_channels} -> {self.out_channels}) "
                f"not divisible by groups={self.groups}"
            )

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        kh, kw = self.kernel
        return (self.out_channels, self.in_channels // self.groups, kh, kw)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        hp, wp = h + 2 * self.padding, w + 2 * self.padding
        if kh > hp or kw > wp:
            raise ShapeError("conv2d", f"padded input >= kernel {self.kernel}", (hp, wp))
        return ((hp - kh) // self.stride + 1, (wp - kw) // self.stride + 1)


def count_params(spec: ConvSpec, form: str = "exact") -> int:
    """Parameter count of a convolution.

    ``form``:
      * ``"exact"`` -- elements actually stored: c_u*(c_i/G)*kh*kw (+ c_u bias).
      * ``"ungrouped"`` -- c_u*(c_i*kh*kw + 1), the count the layer would
        have without groups (the ``+1`` only when ``spec.bias``).
      * ``"grouped_approx"`` -- G*(c_i/G)*((c_u/G)*kh*kw + 1). This is the
        commonly quoted "ungrouped count divided by G" approximation; it
        counts the bias term c_i times rather than c_u times, so it is not
        an exact count of anything allocated.
    """
    ci, cu, g = spec.in_channels, spec.out_channels, spec.groups
    kh, kw = spec.kernel
    b = 1 if spec.bias else 0
    if form == "exact":
        return cu * (ci // g) * kh * kw + b * cu
    if form == "ungrouped":
        return cu * (ci * kh * kw + b)
    if form == "grouped_approx":
        return g * (ci // g) * ((cu // g) * kh * kw + b)
    raise ValueError(f"unknown count form {form!r}")


# ---------------------------------------------------------------- conv


def _check_nchw(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(op, "4-D (B, C, H, W) input", x.shape)


def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Grouped 2-D cross-correlation via im2col and batched matmul."""
    _check_nchw(x, "conv2d")
    B, C, H, W = x.shape
    if C != spec.in_channels:
        raise ShapeError("conv2d", f"{spec.in_channels} input channels", C)
    if weight.shape != spec.weight_shape:
        raise ShapeError("conv2d weight", spec.weight_shape, weight.shape)
    if spec.bias and (bias is None or bias.shape != (spec.out_channels,)):
        raise ShapeError("conv2d bias", (spec.out_channels,), None if bias is None else bias.shape)
    G, O = spec.groups, spec.out_channels
    Cg, Og = C // G, O // G
    kh, kw = spec.kernel
    s, p = spec.stride, spec.padding
    Ho, Wo = spec.output_size(H, W)
    K, P = Cg * kh * kw, Ho * Wo

    xd = x.data
    pointwise = kh == 1 and kw == 1 and s == 1 and p == 0
    if pointwise:
        cols = xd.reshape(B, G, Cg, P)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
        cols = (
            win.reshape(B, G, Cg, Ho, Wo, kh, kw)
            .transpose(0, 1, 2, 5, 6, 3, 4)
            .reshape(B, G, K, P)
        )
    wmat = weight.data.reshape(G, Og, K)
    out = np.matmul(wmat, cols).reshape(B, O, Ho, Wo)
    if bias is not None:
        out = out + bias.data.reshape(1, O, 1, 1)

    def back(g):
        g4 = g.reshape(B, G, Og, P)
        dw = np.matmul(g4, cols.swapaxes(-1, -2)).sum(axis=0).reshape(weight.shape)
        dx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.swapaxes(-1, -2), g4)
            if pointwise:
                dx = dcols.reshape(B, C, H, W)
            else:
                dcols = dcols.reshape(B, C, kh, kw, Ho, Wo)
                dxp = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i : i + s * Ho : s, j : j + s * Wo : s] += dcols[:, :, i, j]
                dx = dxp[:, :, p : p + H, p : p + W] if p else dxp
                dx = np.ascontiguousarray(dx)
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, "conv2d", inputs, back)


# ---------------------------------------------------------------- batch norm


@dataclass
class BatchNormState:
    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    training: bool = True

    @classmethod
    def create(cls, channels: int, dtype=np.float64, name: str = "bn") -> "BatchNormState":
        return cls(
            gamma=Parameter(np.ones(channels, dtype=dtype), name=f"{name}.gamma", decay_exempt=True),
            beta=Parameter(np.zeros(channels, dtype=dtype), name=f"{name}.beta", decay_exempt=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batch_norm(x: Tensor, state: BatchNormState) -> Tensor:
    """Per-channel normalization over (batch, H, W).

    Train mode uses batch statistics (and differentiates through them) and
    updates the running estimates; eval mode is a fixed affine map.
    """
    if x.data.ndim not in (2, 4):
        raise ShapeError("batch_norm", "2-D or 4-D input", x.shape)
    C = x.shape[1]
    if C != state.channels:
        raise ShapeError("batch_norm", f"{state.channels} channels", C)
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    bshape = (1, C) if x.data.ndim == 2 else (1, C, 1, 1)
    xd = x.data
    gamma, beta = state.gamma, state.beta
    n = xd.size // C

    if state.training:
        mean = xd.mean(axis=axes)
        centered = xd - mean.reshape(bshape)
        var = np.mean(centered * centered, axis=axes)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = centered * inv_std.reshape(bshape)
        unbiased = var * (n / (n - 1)) if n > 1 else var
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mean
        state.running_var = (1 - m) * state.running_var + m * unbiased
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (xd - state.running_mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    training = state.training

    def back(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            dx = (inv_std.reshape(bshape) / n) * (
                n * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return dx, dgamma, dbeta

    return make_node(out, "batch_norm", (x, gamma, beta), back)


# ---------------------------------------------------------------- shape ops


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.data.ndim != len(ref) or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError("concat_channels", f"batch/spatial {ref[:1] + ref[2:]}", t.shape)
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def back(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return make_node(out, "concat", xs, back)


def zero_pad_channels(x: Tensor, channels: int) -> Tensor:
    c = x.shape[1]
    if channels < c:
        raise ShapeError("zero_pad_channels", f"target >= {c} channels", channels)
    if channels == c:
        return x
    pad = [(0, 0)] * x.data.ndim
    pad[1] = (0, channels - c)
    out = np.pad(x.data, pad)
    return make_node(out, "zero_pad", (x,), lambda g: (np.ascontiguousarray(g[:, :c]),))


def residual_add_zero_pad(x: Tensor, y: Tensor) -> Tensor:
    """y + x, with x zero-padded along channels up to y's width."""
    if x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
        raise ShapeError("residual_add", f"batch/spatial of {y.shape}", x.shape)
    cx, cy = x.shape[1], y.shape[1]
    if cy < cx:
        raise ShapeError("residual_add", f"shortcut channels <= {cy}", cx)
    out = y.data.copy()
    out[:, :cx] += x.data

    def back(g):
        return np.ascontiguousarray(g[:, :cx]), g

    return make_node(out, "residual_add", (x, y), back)


# ---------------------------------------------------------------- pooling, activations, heads


def avg_pool_stride2(x: Tensor) -> Tensor:
    """2x2 average pool with stride 2 (odd trailing rows/cols are dropped)."""
    _check_nchw(x, "avg_pool")
    B, C, H, W = x.shape
    Ho, Wo = H // 2, W // 2
    if Ho < 1 or Wo < 1:
        raise ShapeError("avg_pool", "spatial >= 2", (H, W))
    crop = x.data[:, :, : 2 * Ho, : 2 * Wo]
    out = crop.reshape(B, C, Ho, 2, Wo, 2).mean(axis=(3, 5))

    def back(g):
        dx = np.zeros(x.shape, dtype=g.dtype)
        up = np.broadcast_to(g[:, :, :, None, :, None] / 4.0, (B, C, Ho, 2, Wo, 2))
        dx[:, :, : 2 * Ho, : 2 * Wo] = up.reshape(B, C, 2 * Ho, 2 * Wo)
        return (dx,)

    return make_node(out, "avg_pool", (x,), back)


def global_avg_pool(x: Tensor) -> Tensor:
    _check_nchw(x, "global_avg_pool")
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))

    def back(g):
        return (np.broadcast_to(g[:, :, None, None] / (H * W), x.shape).copy(),)

    return make_node(out, "global_avg_pool", (x,), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(x.data * mask, "relu", (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))
    return make_node(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ W.T + b with W of shape (out_features, in_features)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError("linear", f"(B, {weight.shape[1] if weight.data.ndim == 2 else '?'})", x.shape)
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, "linear", inputs, back)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    if logits.data.ndim != 2:
        raise ShapeError("softmax_cross_entropy", "(B, num_classes) logits", logits.shape)
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ShapeError("softmax_cross_entropy labels", (B,), labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()

    def back(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / B),)

    return make_node(np.asarray(loss, dtype=logits.dtype), "softmax_ce", (logits,), back)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- modules


class Module:
    """Minimal container tracking named parameters, buffers and children."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        object.__setattr__(self, name, module)
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, "BatchNorm2d", str]]:
        """Yields (full name, owning module, attribute) for running statistics."""
        for name, child in self._children.items():
            yield from child.named_buffers(prefix + name + ".")

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
            if isinstance(m, BatchNorm2d):
                m.state.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def name_parameters(self) -> None:
        """Stamp each Parameter with its dotted path."""
        for name, p in self.named_parameters():
            p.name = name

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.spec = spec
        fan_in = (spec.in_channels // spec.groups) * spec.kernel[0] * spec.kernel[1]
        self.weight = Parameter(he_normal(rng, spec.weight_shape, fan_in, dtype))
        if spec.bias:
            self.bias = Parameter(np.zeros(spec.out_channels, dtype=dtype), decay_exempt=True)
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.spec, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=np.float64):
        super().__init__()
        self.state = BatchNormState.create(channels, dtype)
        self.gamma = self.state.gamma
        self.beta = self.state.beta

    def named_buffers(self, prefix: str = ""):
        yield prefix + "running_mean", self, "running_mean"
        yield prefix + "running_var", self, "running_var"

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.state)


class ConvBN(Module):
    """Conv -> BatchNorm (-> ReLU): the C{s}-BR composite, or C{s}-B without ReLU."""

    def __init__(self, spec: ConvSpec, rng: np.random.Generator, relu: bool = True, dtype=np.float64):
        super().__init__()
        self.conv = Conv2d(spec, rng, dtype)
        self.bn = BatchNorm2d(spec.out_channels, dtype)
        self.relu = relu

    @property
    def spec(self) -> ConvSpec:
        return self.conv.spec

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return relu(y) if self.relu else y


def c_br(x: Tensor, kernel_size: int, spec: ConvSpec, weight: Tensor, state: BatchNormState,
         bias: Optional[Tensor] = None) -> Tensor:
    """Functional C{s}-BR: conv2d -> batch_norm -> relu."""
    if spec.kernel != (kernel_size, kernel_size):
        raise ShapeError("c_br", f"{kernel_size}x{kernel_size} kernel", spec.kernel)
    return relu(batch_norm(conv2d(x, spec, weight, bias), state))


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.weight = Parameter(he_normal(rng, (out_features, in_features), in_features, dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype), decay_exempt=True)

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)
