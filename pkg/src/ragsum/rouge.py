"""ROUGE-N and ROUGE-L over pre-tokenized sequences.

Scores are computed on lowercased whitespace tokens of detokenized text with
no stemming or stopword removal; callers tokenize, these functions only
count. Degenerate inputs (reference shorter than n, empty candidate) yield a
zero score and a warning rather than an error.
"""

from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Sequence


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float


def _make(precision: float, recall: float) -> RougeScore:
    denom = precision + recall
    f1 = 2.0 * precision * recall / denom if denom > 0 else 0.0
    return RougeScore(precision=precision, recall=recall, f1=f1)


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: Sequence, reference: Sequence, n: int) -> RougeScore:
    """Clipped n-gram overlap: recall over the reference, precision over the
    candidate."""
    ref_grams = _ngrams(reference, n)
    if not ref_grams:
        warnings.warn(f"reference shorter than n={n}; ROUGE-{n} is zero", stacklevel=2)
        return RougeScore(0.0, 0.0, 0.0)
    cand_grams = _ngrams(candidate, n)
    overlap = sum(min(count, ref_grams[gram]) for gram, count in cand_grams.items())
    recall = overlap / sum(ref_grams.values())
    precision = overlap / sum(cand_grams.values()) if cand_grams else 0.0
    return _make(precision, recall)


def _lcs_length(a: Sequence, b: Sequence) -> int:
    if len(b) > len(a):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        curr = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                curr.append(prev[j - 1] + 1)
            else:
                curr.append(max(prev[j], curr[j - 1]))
        prev = curr
    return prev[-1]


def rouge_l(candidate: Sequence, reference: Sequence) -> RougeScore:
    """Longest-common-subsequence F-measure."""
    if not candidate or not reference:
        warnings.warn("empty candidate or reference; ROUGE-L is zero", stacklevel=2)
        return RougeScore(0.0, 0.0, 0.0)
    lcs = _lcs_length(candidate, reference)
    return _make(lcs / len(candidate), lcs / len(reference))
