"""Evaluation metrics: sentence-level perplexity and corpus BLEU-2."""

from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

import numpy as np

from .models import Generator, SequenceBatch


def sentence_nll(gen: Generator, batch: SequenceBatch) -> np.ndarray:
    """Negative log-likelihood of every sentence (EOS included when present)."""
    with np.errstate(divide="ignore"):
        return -gen.log_prob(batch)


def mean_nll(gen: Generator, batch: SequenceBatch) -> float:
    if len(batch) == 0:
        raise ValueError("empty split")
    nll = sentence_nll(gen, batch)
    if not np.all(np.isfinite(nll)):
        return math.inf
    try:
        return float(math.fsum(nll) / len(nll))
    except OverflowError:
        return math.inf


def perplexity(gen: Generator, batch: SequenceBatch) -> float:
    """``exp`` of the mean per-sentence NLL; ``inf`` if any sentence has probability zero."""
    nll = mean_nll(gen, batch)
    # Masked tokens sit at log-prob -1e30, which still counts as impossible.
    if not math.isfinite(nll) or nll > 700:
        return math.inf
    return math.exp(nll)


def _ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu2(hypotheses: Sequence[Sequence], references: Sequence[Sequence]) -> float:
    """Corpus BLEU with equal weights on 1- and 2-gram precision.

    Every hypothesis is scored against the whole reference set: an n-gram's
    count is clipped by its largest count in any single reference.  A zero
    bigram match count is smoothed to ``1 / (total + 1)``.  The brevity
    penalty uses, per hypothesis, the closest reference length (shorter wins
    ties).
    """
    if not hypotheses or not references:
        raise ValueError("bleu2 needs non-empty hypotheses and references")
    pools = []
    for n in (1, 2):
        pool: dict = {}
        for ref in references:
            for g, c in _ngrams(list(ref), n).items():
                if c > pool.get(g, 0):
                    pool[g] = c
        pools.append(pool)
    ref_lens = np.array(sorted({len(r) for r in references}))
    matches, totals = [0, 0], [0, 0]
    hyp_len = ref_len = 0
    for hyp in hypotheses:
        hyp = list(hyp)
        for k, n in enumerate((1, 2)):
            counts = _ngrams(hyp, n)
            matches[k] += sum(min(c, pools[k].get(g, 0)) for g, c in counts.items())
            totals[k] += sum(counts.values())
        hyp_len += len(hyp)
        ref_len += int(ref_lens[np.argmin(np.abs(ref_lens - len(hyp)))])
    if totals[0] == 0 or matches[0] == 0:
        return 0.0
    p1 = matches[0] / totals[0]
    p2 = matches[1] / totals[1] if matches[1] > 0 else 1.0 / (totals[1] + 1)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.sqrt(p1 * p2)
