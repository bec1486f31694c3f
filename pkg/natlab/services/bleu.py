"""
Corpus-level BLEU over tokenized sentences.
"""
import math
from collections import Counter
from typing import List, Sequence, Tuple

from nltk.translate.bleu_score import brevity_penalty
from nltk.util import ngrams

from natlab.models.metrics import BleuReport

MAX_ORDER = 4


def ngram_stats(hypothesis: Sequence[str], reference: Sequence[str]) -> Tuple[List[int], List[int]]:
    """Clipped matches and hypothesis n-gram totals for orders 1..4."""
    matches, totals = [], []
    for n in range(1, MAX_ORDER + 1):
        hyp, ref = Counter(ngrams(hypothesis, n)), Counter(ngrams(reference, n))
        matches.append(sum((hyp & ref).values()))
        totals.append(sum(hyp.values()))
    return matches, totals


def corpus_bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> BleuReport:
    """
    Standard corpus BLEU with 4-gram clipping and brevity penalty.

    An order with no hypothesis n-grams counts as precision 1 when the
    references have none of that order either, and 0 otherwise.

    Args:
        hypotheses: Tokenized hypotheses
        references: Tokenized references, one per hypothesis

    Raises:
        ValueError: On an empty corpus or a count mismatch
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("corpus_bleu needs a non-empty corpus")

    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    ref_totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        m, t = ngram_stats(hyp, ref)
        for n in range(MAX_ORDER):
            matches[n] += m[n]
            totals[n] += t[n]
            ref_totals[n] += max(len(ref) - n, 0)
        hyp_len += len(hyp)
        ref_len += len(ref)

    precisions = []
    for n in range(MAX_ORDER):
        if totals[n] == 0:
            precisions.append(1.0 if ref_totals[n] == 0 else 0.0)
        else:
            precisions.append(matches[n] / totals[n])

    brevity = float(brevity_penalty(ref_len, hyp_len))
    if min(precisions) == 0.0 or brevity == 0.0:
        score = 0.0
    else:
        score = 100.0 * brevity * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)

    return BleuReport(
        bleu=min(score, 100.0),
        precisions=precisions,
        brevity_penalty=brevity,
        hyp_length=hyp_len,
        ref_length=ref_len,
    )


def corpus_bleu_lines(hypothesis_lines: Sequence[str], reference_lines: Sequence[str]) -> BleuReport:
    """corpus_bleu over whitespace-tokenized lines."""
    return corpus_bleu([h.split() for h in hypothesis_lines], [r.split() for r in reference_lines])
