"""
Average model maintained as an exponential moving average of the online model.
"""
import logging

import numpy as np

from natlab.services.params import ParamStore

logger = logging.getLogger(__name__)


def init_average(online: ParamStore) -> ParamStore:
    """Deep, value-equal copy of the online store that never receives gradients."""
    return online.copy(requires_grad=False)


def ema_step(average: ParamStore, online: ParamStore, alpha: float) -> ParamStore:
    """
    In place: average = alpha * average + (1 - alpha) * online, per element.

    Args:
        average: Average store (updated in place)
        online: Online store (read only)
        alpha: Decay in [0, 1]

    Returns:
        The same average store
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    average.assert_compatible(online)
    if alpha == 1.0:
        return average

    for name, node in average.items():
        target = online[name].value
        if alpha == 0.0:
            np.copyto(node.value, target)
            continue
        node.value *= node.value.dtype.type(alpha)
        node.value += node.value.dtype.type(1.0 - alpha) * target
    return average
