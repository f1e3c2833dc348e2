"""Finite-difference gradient checks on down-scaled micro-dense instances."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .autograd import Tensor, gradcheck
from .layers import softmax_cross_entropy
from .network import build_block, build_network
from .planner import ArchConfig, plan_block


def downscale(config: ArchConfig) -> ArchConfig:
    """Two-block, 8x8 version of a config: one plain and one downsampling block."""
    return replace(config, W0=8, alpha=4, N=2, stages=[1, 1], resolution=8, num_classes=3)


def _random_projection(shape, rng):
    return rng.standard_normal(shape)


def block_gradcheck(c_in: int = 8, c_out: int = 12, n: int = 3, spatial: int = 4, batch: int = 2,
                    downsample: bool = False, gc: int = 4, ra: float = None, seed: int = 0,
                    h: float = 1e-5) -> dict[str, float]:
    """Max relative error per tensor (every parameter plus the input) of one block.

    The scalar checked is <block(x), R> for a fixed random R, so every output
    element carries gradient.
    """
    kwargs = {} if ra is None else {"ra": ra}
    plan = plan_block(c_in, c_out, n, gc, downsample=downsample, spatial=spatial, **kwargs)
    rng = np.random.default_rng(seed)
    block = build_block(plan, rng, dtype=np.float64)
    x = Tensor(rng.standard_normal((batch, c_in, spatial, spatial)), requires_grad=True, name="input")
    out_shape = block(x).shape
    proj = Tensor(_random_projection(out_shape, rng))

    def loss():
        return (block(x) * proj).sum()

    return gradcheck(loss, block.parameters() + [x], h=h)


def network_gradcheck(config: ArchConfig, seed: int = 0, batch: int = 2, h: float = 1e-5) -> dict[str, float]:
    """Max relative error per parameter of a full network on random data."""
    net = build_network(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    images = rng.standard_normal((batch, config.in_channels, config.resolution, config.resolution))
    labels = rng.integers(0, config.num_classes, batch)

    def loss():
        return softmax_cross_entropy(net(images), labels)

    return gradcheck(loss, net.parameters(), h=h)
