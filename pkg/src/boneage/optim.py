"""Parameter updates: plain SGD and the adaptive (Adam-style) variant."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .errors import ContractError, TrainingError
from .tensor import Tensor


@dataclass
class OptimizerConfig:
    """Knobs a training run needs. batch_size rides along for convenience."""

    kind: str = "adaptive"
    learning_rate: float = 1e-3
    batch_size: int = 8


@dataclass
class OptimizerState:
    """Per-run optimizer state; moment buffers are keyed by parameter name."""

    learning_rate: float
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")


def optimizer_step(
    params: Dict[str, Tensor],
    grads: Dict[str, np.ndarray],
    state: OptimizerState,
    kind: str = "sgd",
) -> None:
    """Apply one update step in place and bump state.step_count by one.

    sgd:       p <- p - lr * g
    adaptive:  first/second moment estimates with bias correction.

    Parameters without an entry in ``grads`` (or with a None entry) are
    skipped, so frozen or unused parameters cost nothing.
    """
    if kind not in ("sgd", "adaptive"):
        raise ContractError(f"unknown optimizer kind {kind!r}")
    lr = np.float32(state.learning_rate)
    state.step_count += 1
    t = state.step_count
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float32)
        if g.shape != p.data.shape:
            raise ContractError(
                f"gradient for {name!r} has shape {g.shape}, parameter is {p.data.shape}"
            )
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if kind == "sgd":
            p.data -= lr * g
            continue
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
        v = state.v.get(name)
        if v is None:
            v = np.zeros_like(p.data)
            state.v[name] = v
        b1, b2 = np.float32(state.beta1), np.float32(state.beta2)
        m *= b1
        m += (np.float32(1.0) - b1) * g
        v *= b2
        v += (np.float32(1.0) - b2) * (g * g)
        m_hat = m / np.float32(1.0 - state.beta1**t)
        v_hat = v / np.float32(1.0 - state.beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + np.float32(state.eps))


def collect_grads(params: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    """Snapshot .grad for every parameter that has one."""
    return {name: p.grad for name, p in params.items() if p.grad is not None}


def zero_grads(params: Dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
