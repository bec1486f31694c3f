"""
Random masked views of target sentences.

A view masks k ~ U{1..N} positions chosen uniformly without replacement.
Two independent views per target give the shared set: positions masked in both.
"""
import logging
from typing import List, Optional, Sequence

import numpy as np

from natlab.models.corpus import MASK_ID, PAD_ID
from natlab.models.views import DualViewBatch, MaskedView

logger = logging.getLogger(__name__)


def make_view(target_ids: Sequence[int], masked_positions: Sequence[int]) -> MaskedView:
    """Build the view that masks exactly `masked_positions` (0-based)."""
    target = [int(t) for t in target_ids]
    masked = sorted({int(p) for p in masked_positions})
    masked_set = set(masked)
    observed = [i for i in range(len(target)) if i not in masked_set]
    input_ids = [MASK_ID if i in masked_set else tok for i, tok in enumerate(target)]
    return MaskedView(
        input_ids=input_ids,
        masked_positions=masked,
        observed_positions=observed,
        original_ids=target,
    )


def sample_view(target_ids: Sequence[int], rng: np.random.Generator) -> MaskedView:
    """
    Mask a uniformly drawn number of uniformly drawn positions.

    Args:
        target_ids: Unpadded target ids (length >= 1)
        rng: Random generator

    Returns:
        MaskedView with 1 <= |masked| <= len(target_ids)
    """
    n = len(target_ids)
    if n < 1:
        raise ValueError("Cannot mask an empty target")
    if PAD_ID in target_ids:
        raise ValueError("Targets passed to sample_view must be unpadded")
    k = int(rng.integers(1, n + 1))
    positions = rng.choice(n, size=k, replace=False)
    return make_view(target_ids, positions)


def shared_positions(view1: MaskedView, view2: MaskedView) -> List[int]:
    return sorted(set(view1.masked_positions) & set(view2.masked_positions))


def pair_views(
    view1: List[MaskedView],
    view2: List[MaskedView],
    source_ids: Optional[List[List[int]]] = None,
) -> DualViewBatch:
    """Assemble a DualViewBatch from already-built views."""
    return DualViewBatch(
        view1=view1,
        view2=view2,
        shared_positions=[shared_positions(a, b) for a, b in zip(view1, view2)],
        source_ids=source_ids or [],
    )


def make_dual_batch(
    targets: Sequence[Sequence[int]],
    rng: np.random.Generator,
    source_ids: Optional[List[List[int]]] = None,
) -> DualViewBatch:
    """
    Two independent random views of every target.

    Each sentence gets its own pair of child generators seeded from `rng`,
    so the two views come from independent streams and are exchangeable.
    """
    seeds = rng.integers(0, 2**63 - 1, size=(len(targets), 2))
    view1, view2 = [], []
    for target, (s1, s2) in zip(targets, seeds):
        view1.append(sample_view(target, np.random.default_rng(int(s1))))
        view2.append(sample_view(target, np.random.default_rng(int(s2))))
    batch = pair_views(view1, view2, source_ids)
    logger.debug(
        "Dual batch: %d sentences, %d shared positions",
        len(batch), sum(len(s) for s in batch.shared_positions),
    )
    return batch
