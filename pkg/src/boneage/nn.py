"""Shared building blocks for the three networks.

Models in this package are a plain dict of named parameter Tensors plus
a forward function; these helpers cover He-uniform initialization, the
conv+relu blocks everything is assembled from, and minibatch iteration.
"""

from __future__ import annotations

from typing import Dict, Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def he_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=tuple(shape)).astype(np.float32)


def init_conv(
    params: Dict[str, Tensor],
    rng: np.random.Generator,
    name: str,
    out_ch: int,
    in_ch: int,
    k: int = 3,
) -> None:
    """Register weight/bias for one conv layer under ``name``."""
    fan_in = in_ch * k * k
    params[f"{name}.w"] = Tensor(he_uniform(rng, (out_ch, in_ch, k, k), fan_in), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(out_ch, dtype=np.float32), requires_grad=True)


def init_dense(
    params: Dict[str, Tensor],
    rng: np.random.Generator,
    name: str,
    in_dim: int,
    out_dim: int,
) -> None:
    params[f"{name}.w"] = Tensor(he_uniform(rng, (in_dim, out_dim), in_dim), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(out_dim, dtype=np.float32), requires_grad=True)


def conv_relu(x: Tensor, params: Dict[str, Tensor], name: str, padding: int = 1) -> Tensor:
    return T.relu(T.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=1, padding=padding))


def conv_block(x: Tensor, params: Dict[str, Tensor], name: str) -> Tensor:
    """Two padded 3x3 conv+relu layers, the standard double-conv block."""
    x = conv_relu(x, params, f"{name}.conv1")
    return conv_relu(x, params, f"{name}.conv2")


def init_conv_block(
    params: Dict[str, Tensor],
    rng: np.random.Generator,
    name: str,
    in_ch: int,
    out_ch: int,
) -> None:
    init_conv(params, rng, f"{name}.conv1", out_ch, in_ch)
    init_conv(params, rng, f"{name}.conv2", out_ch, out_ch)


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Shuffled index batches covering 0..n-1 once."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]
