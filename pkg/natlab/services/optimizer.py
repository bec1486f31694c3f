"""
Adam with bias correction, the warmup/inverse-sqrt learning-rate schedule
and global-norm gradient clipping.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from natlab.services.params import ParamStore

logger = logging.getLogger(__name__)


def lr_at(step: int, warmup_steps: int, peak_lr: float) -> float:
    """peak_lr * min(step / warmup, sqrt(warmup / step)) for step >= 1."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    if warmup_steps < 1:
        raise ValueError(f"warmup_steps must be >= 1, got {warmup_steps}")
    return peak_lr * min(step / warmup_steps, math.sqrt(warmup_steps / step))


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """
    Scale grads in place so their global norm is at most max_norm.

    Args:
        grads: name -> gradient array
        max_norm: Clip threshold; 0 disables clipping

    Returns:
        Global norm before clipping
    """
    norm = global_norm(grads)
    if max_norm > 0.0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= g.dtype.type(factor)
    return norm


@dataclass
class AdamState:
    """First and second moment estimates per parameter."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ParamStore) -> "AdamState":
        return cls(
            m={name: np.zeros_like(node.value) for name, node in params.items()},
            v={name: np.zeros_like(node.value) for name, node in params.items()},
        )


def adam_step(
    params: ParamStore,
    grads: Dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update of `params` in place."""
    state.step += 1
    t = state.step
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for name, node in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (lr / correction1) * m / (np.sqrt(v / correction2) + eps)
        node.value -= update.astype(node.value.dtype, copy=False)
