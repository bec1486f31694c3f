"""
Mask-predict decoding.

For each of the top-k predicted lengths N the decoder starts from N [MASK]
tokens, predicts every position, then for t = 2..T re-masks the
n = ceil(N * (T - t + 1) / T) least confident positions and predicts only
those again. The candidate with the highest mean token log-probability wins.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np

from natlab.models.config import DecodeConfig
from natlab.models.corpus import MASK_ID, NON_EMITTABLE_IDS, PAD_ID, SentencePair
from natlab.models.hypothesis import Hypothesis
from natlab.services import autodiff as ad
from natlab.services import transformer
from natlab.services.params import ParamStore

logger = logging.getLogger(__name__)


def remask_count(length: int, iteration: int, iterations: int) -> int:
    """Positions re-predicted at iteration t (1-based): ceil(N * (T - t + 1) / T)."""
    if not 1 <= iteration <= iterations:
        raise ValueError(f"iteration {iteration} outside [1, {iterations}]")
    return -(-length * (iterations - iteration + 1) // iterations)


def lowest_confidence(confidence: np.ndarray, n: int) -> np.ndarray:
    """Indices of the n smallest values; ties go to the lower index."""
    order = np.lexsort((np.arange(len(confidence)), confidence))
    return np.sort(order[:n])


def _predict(log_probs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Argmax over emittable ids and its log-probability under the full distribution."""
    restricted = log_probs.copy()
    restricted[..., NON_EMITTABLE_IDS] = -np.inf
    tokens = restricted.argmax(axis=-1)
    confidence = np.take_along_axis(log_probs, tokens[..., None], axis=-1)[..., 0]
    return tokens, confidence


def _tile(encoder: transformer.EncoderState, k: int) -> transformer.EncoderState:
    return transformer.EncoderState(
        hidden=ad.constant(np.repeat(encoder.hidden.value, k, axis=0), encoder.hidden.dtype),
        source_pad=np.repeat(encoder.source_pad, k, axis=0),
        length_logits=encoder.length_logits,
    )


def select_candidate(hypotheses: Sequence[Hypothesis]) -> Hypothesis:
    """Highest score; ties by shorter length, then lexicographic token ids."""
    if not hypotheses:
        raise ValueError("select_candidate needs at least one hypothesis")
    return min(hypotheses, key=lambda h: h.sort_key())


def mask_predict(
    params: ParamStore,
    source_ids: Sequence[int],
    config: DecodeConfig,
    trace: Optional[list] = None,
) -> Hypothesis:
    """
    Decode one source sentence.

    Args:
        params: Frozen model weights
        source_ids: Source ids starting with [LEN]
        config: Iterations, length candidates and optional threshold mode
        trace: If given, receives one dict per (iteration, candidate) with the
            positions predicted at that iteration

    Returns:
        Best Hypothesis over the length candidates
    """
    src = np.asarray(source_ids, dtype=np.int64)[None, :]
    if src.shape[1] < 2:
        raise ValueError("source_ids must contain [LEN] and at least one token")

    encoder = transformer.encode(params, src)
    candidates = transformer.predict_length(encoder, config.length_candidates)[0]
    lengths = [length for length, _ in candidates]
    k, width = len(lengths), max(lengths)
    encoder = _tile(encoder, k)

    tokens = np.full((k, width), PAD_ID, dtype=np.int64)
    confidence = np.zeros((k, width), dtype=np.float64)
    for c, length in enumerate(lengths):
        tokens[c, :length] = MASK_ID
    active = [True] * k
    T = config.iterations

    for t in range(1, T + 1):
        if t == 1:
            targets = [np.arange(length) for length in lengths]
        else:
            targets = []
            for c, length in enumerate(lengths):
                conf = confidence[c, :length]
                if config.remask_threshold is not None:
                    chosen = np.flatnonzero(conf < np.log(config.remask_threshold))
                    if chosen.size == 0:
                        active[c] = False
                else:
                    chosen = lowest_confidence(conf, remask_count(length, t, T))
                targets.append(chosen if active[c] else np.arange(0))
            if not any(active):
                break
            for c, chosen in enumerate(targets):
                tokens[c, chosen] = MASK_ID

        logits = transformer.decode_tokens(params, encoder, tokens)
        log_probs = ad.log_softmax(logits, axis=-1).value
        predicted, conf = _predict(log_probs)
        for c, chosen in enumerate(targets):
            tokens[c, chosen] = predicted[c, chosen]
            confidence[c, chosen] = conf[c, chosen]
            if trace is not None:
                trace.append({"iteration": t, "candidate": c, "length": lengths[c], "positions": chosen.tolist()})

    hypotheses = [
        Hypothesis(
            tokens=tokens[c, :length].tolist(),
            token_logprobs=confidence[c, :length].tolist(),
        )
        for c, length in enumerate(lengths)
    ]
    return select_candidate(hypotheses)


def translate_corpus(
    params: ParamStore,
    sources: Sequence[Sequence[int]],
    config: DecodeConfig,
    workers: Optional[int] = None,
) -> List[Hypothesis]:
    """
    Decode many sources, in input order.

    Sentences run on a thread pool; the store is only read.
    """
    workers = workers or config.workers
    start = time.perf_counter()
    if workers <= 1:
        results = [mask_predict(params, src, config) for src in sources]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda src: mask_predict(params, src, config), sources))
    elapsed = time.perf_counter() - start
    if sources:
        logger.info(
            "Decoded %d sentences in %.2fs (%.1f sent/s, T=%d, k=%d)",
            len(sources), elapsed, len(sources) / max(elapsed, 1e-9), config.iterations, config.length_candidates,
        )
    return results


def length_accuracy(params: ParamStore, pairs: Sequence[SentencePair], batch_size: int = 64) -> float:
    """Fraction of pairs whose top-1 predicted length equals the target length."""
    if not pairs:
        return 0.0
    correct = 0
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        width = max(len(p.source_ids) for p in chunk)
        src = np.full((len(chunk), width), PAD_ID, dtype=np.int64)
        for i, p in enumerate(chunk):
            src[i, :len(p.source_ids)] = p.source_ids
        encoder = transformer.encode(params, src)
        for pair, ranked in zip(chunk, transformer.predict_length(encoder, 1)):
            correct += int(ranked[0][0] == pair.target_length)
    return correct / len(pairs)
