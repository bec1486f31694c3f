"""
Terms of the training objective.

  total = 1/2 (nll1 + nll2)
        + lambda/5 (mkl1 + mkl2 + skl1 + skl2 + skl3)
        + len

nll terms are label-smoothed masked-token NLLs of the two views; mkl terms
tie the online model to the average model on each view; skl terms tie
predictions at positions masked in both views. Average-model
log-probabilities are constants for backward.
"""
import logging
from dataclasses import dataclass
from typing import List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from natlab.errors import CorpusError, ShapeError
from natlab.models.config import LossConfig
from natlab.models.metrics import LossBreakdown
from natlab.models.views import DualViewBatch, MaskedView
from natlab.services import autodiff as ad
from natlab.services.autodiff import TensorNode

logger = logging.getLogger(__name__)

KL_TERMS = ("mkl1", "mkl2", "skl1", "skl2", "skl3")
TERM_NAMES = ("nll1", "nll2") + KL_TERMS + ("len",)


@dataclass
class LossTerms:
    """The eight differentiable objective terms, already batch-reduced."""

    nll1: TensorNode
    nll2: TensorNode
    mkl1: TensorNode
    mkl2: TensorNode
    skl1: TensorNode
    skl2: TensorNode
    skl3: TensorNode
    len: TensorNode
    # unsmoothed masked-token NLL over both views, for reporting
    token_nll_sum: float = 0.0
    token_count: int = 0

    def as_floats(self) -> dict:
        return {name: float(getattr(self, name).value) for name in TERM_NAMES}

    def nll_per_token(self) -> float:
        return self.token_nll_sum / self.token_count if self.token_count else 0.0


def _flat_rows(positions: Sequence[Sequence[int]], width: int) -> np.ndarray:
    """Row indices into a (B * width, V) view for per-sentence position lists."""
    rows = [b * width + p for b, sentence in enumerate(positions) for p in sentence]
    return np.asarray(rows, dtype=np.int64)


def _flatten(log_probs: TensorNode) -> Tuple[TensorNode, int]:
    if log_probs.ndim != 3:
        raise ShapeError("flatten", log_probs.shape, ("batch", "length", "vocab"))
    b, n, v = log_probs.shape
    return ad.reshape(log_probs, (b * n, v)), n


def bikl(logp: TensorNode, logq: TensorNode, axis: int = -1) -> TensorNode:
    """
    1/2 (KL(p||q) + KL(q||p)) along `axis`, from log-distributions.

    Written as 1/2 sum (p - q)(log p - log q), whose summands are each >= 0.
    """
    logp, logq = ad.as_node(logp), ad.as_node(logq)
    if logp.shape != logq.shape:
        raise ShapeError("bikl", logp.shape, logq.shape)
    diff_p = ad.sub(ad.exp(logp), ad.exp(logq))
    diff_log = ad.sub(logp, logq)
    return ad.scale(ad.sum(ad.mul(diff_p, diff_log), axis=axis), 0.5)


def nll_masked(
    log_probs: TensorNode,
    views: Union[MaskedView, Sequence[MaskedView]],
    label_smoothing: float = 0.0,
) -> TensorNode:
    """
    Label-smoothed NLL summed over the masked positions of every view.

    Args:
        log_probs: (B, N, V) log-probabilities, or (N, V) for a single view
        views: One MaskedView per sentence
        label_smoothing: Mass spread uniformly over the vocabulary

    Returns:
        Scalar node: sum over masked positions of
        (1 - eps) * -log p(y) + eps * -mean_v log p(v)
    """
    if isinstance(views, MaskedView):
        views = [views]
        if log_probs.ndim == 2:
            log_probs = ad.reshape(log_probs, (1,) + log_probs.shape)
    flat, width = _flatten(log_probs)
    if len(views) != log_probs.shape[0]:
        raise ShapeError("nll_masked", log_probs.shape, (len(views),))

    rows = _flat_rows([v.masked_positions for v in views], width)
    targets = np.asarray([t for v in views for t in v.masked_targets()], dtype=np.int64)
    picked_rows = ad.gather_rows(flat, rows)
    picked = ad.sum(ad.take_along(picked_rows, targets[:, None]))
    if label_smoothing <= 0.0:
        return ad.neg(picked)
    smooth = ad.sum(ad.mean(picked_rows, axis=-1))
    return ad.neg(ad.add(ad.scale(picked, 1.0 - label_smoothing), ad.scale(smooth, label_smoothing)))


def masked_token_nll(log_probs: np.ndarray, views: Sequence[MaskedView]) -> Tuple[float, int]:
    """Plain (unsmoothed) NLL summed over masked positions, and the position count."""
    total, count = 0.0, 0
    for b, view in enumerate(views):
        positions = np.asarray(view.masked_positions, dtype=np.int64)
        targets = np.asarray(view.masked_targets(), dtype=np.int64)
        total -= float(log_probs[b, positions, targets].sum())
        count += len(positions)
    return total, count


def mean_bikl_over_positions(
    logp: TensorNode,
    logq: TensorNode,
    positions: Sequence[Sequence[int]],
) -> TensorNode:
    """
    Per-sentence mean of bikl over `positions`, averaged over the batch.

    A sentence with no positions contributes 0 (it still counts in the
    batch size). Both inputs are (B, N, V) log-probabilities.
    """
    if logp.shape != logq.shape:
        raise ShapeError("mean_bikl", logp.shape, logq.shape)
    batch = len(positions)
    if batch != logp.shape[0]:
        raise ShapeError("mean_bikl", logp.shape, (batch,))
    rows = _flat_rows(positions, logp.shape[1])
    if rows.size == 0:
        return ad.constant(0.0, logp.dtype)

    weights = np.asarray(
        [1.0 / (len(sentence) * batch) for sentence in positions for _ in sentence],
        dtype=logp.dtype,
    )
    flat_p, _ = _flatten(logp)
    flat_q, _ = _flatten(logq)
    per_row = bikl(ad.gather_rows(flat_p, rows), ad.gather_rows(flat_q, rows))
    return ad.sum(ad.mul(per_row, weights))


def model_consistency(
    online_v1: TensorNode,
    online_v2: TensorNode,
    avg_v1: TensorNode,
    avg_v2: TensorNode,
    batch: DualViewBatch,
) -> Tuple[TensorNode, TensorNode]:
    """(mkl1, mkl2): online vs average on each view's masked positions."""
    avg_v1, avg_v2 = ad.stop_gradient(avg_v1), ad.stop_gradient(avg_v2)
    mkl1 = mean_bikl_over_positions(online_v1, avg_v1, [v.masked_positions for v in batch.view1])
    mkl2 = mean_bikl_over_positions(online_v2, avg_v2, [v.masked_positions for v in batch.view2])
    return mkl1, mkl2


def shared_mask_consistency(
    online_v1: TensorNode,
    online_v2: TensorNode,
    avg_v1: TensorNode,
    avg_v2: TensorNode,
    batch: DualViewBatch,
) -> Tuple[TensorNode, TensorNode, TensorNode]:
    """
    (skl1, skl2, skl3) over the shared positions.

    Pairings are online/online, online-v1/average-v2 and average-v1/online-v2.
    """
    avg_v1, avg_v2 = ad.stop_gradient(avg_v1), ad.stop_gradient(avg_v2)
    shared = batch.shared_positions
    skl1 = mean_bikl_over_positions(online_v1, online_v2, shared)
    skl2 = mean_bikl_over_positions(online_v1, avg_v2, shared)
    skl3 = mean_bikl_over_positions(avg_v1, online_v2, shared)
    return skl1, skl2, skl3


def length_loss(length_logits: TensorNode, true_lengths: Sequence[int]) -> TensorNode:
    """Cross-entropy of the length classifier summed over the batch."""
    lengths = np.asarray(true_lengths, dtype=np.int64)
    n_max = length_logits.shape[-1]
    if lengths.size != length_logits.shape[0]:
        raise ShapeError("length_loss", length_logits.shape, lengths.shape)
    if lengths.size and (lengths.min() < 1 or lengths.max() > n_max):
        raise CorpusError(f"Target length outside [1, {n_max}]: {lengths.min()}..{lengths.max()}")
    logp = ad.log_softmax(length_logits, axis=-1)
    return ad.neg(ad.sum(ad.take_along(logp, (lengths - 1)[:, None])))


def compute_terms(
    online_v1,
    online_v2,
    avg_v1,
    avg_v2,
    batch: DualViewBatch,
    config: LossConfig,
) -> LossTerms:
    """
    All objective terms from the four forward passes.

    Args:
        online_v1, online_v2: ForwardOutput of the online model on each view
        avg_v1, avg_v2: ForwardOutput of the average model on each view
        batch: The DualViewBatch the forwards were run on
        config: Loss settings

    Returns:
        LossTerms; nll and len are divided by the sentence count when
        config.batch_reduction == "mean"
    """
    lp_on1 = ad.log_softmax(online_v1.token_logits, axis=-1)
    lp_on2 = ad.log_softmax(online_v2.token_logits, axis=-1)
    lp_av1 = ad.stop_gradient(ad.log_softmax(avg_v1.token_logits, axis=-1))
    lp_av2 = ad.stop_gradient(ad.log_softmax(avg_v2.token_logits, axis=-1))

    nll1 = nll_masked(lp_on1, batch.view1, config.label_smoothing)
    nll2 = nll_masked(lp_on2, batch.view2, config.label_smoothing)
    len_term = length_loss(online_v1.length_logits, batch.true_lengths())
    if config.batch_reduction == "mean":
        inv = 1.0 / max(len(batch), 1)
        nll1, nll2, len_term = ad.scale(nll1, inv), ad.scale(nll2, inv), ad.scale(len_term, inv)

    mkl1, mkl2 = model_consistency(lp_on1, lp_on2, lp_av1, lp_av2, batch)
    skl1, skl2, skl3 = shared_mask_consistency(lp_on1, lp_on2, lp_av1, lp_av2, batch)
    raw1, count1 = masked_token_nll(lp_on1.value, batch.view1)
    raw2, count2 = masked_token_nll(lp_on2.value, batch.view2)
    return LossTerms(
        nll1=nll1, nll2=nll2, mkl1=mkl1, mkl2=mkl2, skl1=skl1, skl2=skl2, skl3=skl3, len=len_term,
        token_nll_sum=raw1 + raw2, token_count=count1 + count2,
    )


def coefficients(config: LossConfig) -> dict:
    """Weight of every term in the total."""
    kl = config.lambda_ / 5.0
    mc = kl if config.use_model_consistency else 0.0
    sc = kl if config.use_shared_mask_consistency else 0.0
    return {"nll1": 0.5, "nll2": 0.5, "mkl1": mc, "mkl2": mc, "skl1": sc, "skl2": sc, "skl3": sc, "len": 1.0}


def objective(terms: LossTerms, config: LossConfig) -> TensorNode:
    """Differentiable weighted total."""
    total: Optional[TensorNode] = None
    for name, weight in coefficients(config).items():
        if weight == 0.0:
            continue
        term = ad.scale(getattr(terms, name), weight)
        total = term if total is None else ad.add(total, term)
    return total if total is not None else ad.constant(0.0)


def total_loss(parts: Union[LossTerms, Mapping[str, float]], config: LossConfig) -> LossBreakdown:
    """
    Combine the eight terms into a LossBreakdown.

    total = 1/2 (nll1 + nll2) + lambda/5 (mkl1 + mkl2 + skl1 + skl2 + skl3) + len;
    disabled regularizers get coefficient 0 while lambda/5 stays the divisor.
    """
    values = parts.as_floats() if isinstance(parts, LossTerms) else {k: float(v) for k, v in parts.items()}
    missing = [name for name in coefficients(config) if name not in values]
    if missing:
        raise ValueError(f"Missing loss terms: {missing}")

    kl = config.lambda_ / 5.0
    mc = 1.0 if config.use_model_consistency else 0.0
    sc = 1.0 if config.use_shared_mask_consistency else 0.0
    total = (
        0.5 * (values["nll1"] + values["nll2"])
        + kl * (mc * (values["mkl1"] + values["mkl2"]) + sc * (values["skl1"] + values["skl2"] + values["skl3"]))
        + values["len"]
    )
    return LossBreakdown(total=total, **{name: values[name] for name in coefficients(config)})


def kl_violations(breakdown: LossBreakdown, slack: float = 1e-7) -> List[str]:
    """Names of KL terms below -slack."""
    return [name for name in KL_TERMS if getattr(breakdown, name) < -slack]
