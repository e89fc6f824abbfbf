"""Evaluation metrics: Levenshtein error counts, corpus WER/CER, and
corpus BLEU with add-1 smoothing above unigrams."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import List, Sequence, Tuple

from .errors import DataError


@dataclass
class EditCounts:
    sub: int = 0
    ins: int = 0
    dele: int = 0

    @property
    def errors(self) -> int:
        return self.sub + self.ins + self.dele


def edit_distance(ref: Sequence, hyp: Sequence) -> EditCounts:
    """Unit-cost Levenshtein alignment with the operation breakdown.

    The pair is canonicalized before the DP, so swapping the arguments
    swaps ins with dele exactly and keeps sub, regardless of how the
    DP breaks ties.
    """
    if (len(hyp), [str(t) for t in hyp]) < (len(ref), [str(t) for t in ref]):
        counts = _edit_dp(hyp, ref)
        return EditCounts(sub=counts.sub, ins=counts.dele, dele=counts.ins)
    return _edit_dp(ref, hyp)


def _edit_dp(ref: Sequence, hyp: Sequence) -> EditCounts:
    # ties prefer match/substitution, then deletion, then insertion
    n, m = len(ref), len(hyp)
    # dp[i][j] = (total, sub, ins, dele) for ref[:i] vs hyp[:j]
    dp: List[List[Tuple[int, int, int, int]]] = \
        [[(0, 0, 0, 0)] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dp[i][0] = (i, 0, 0, i)
    for j in range(1, m + 1):
        dp[0][j] = (j, 0, j, 0)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            t, s, a, d = dp[i - 1][j - 1]
            if ref[i - 1] == hyp[j - 1]:
                best = (t, s, a, d)
            else:
                best = (t + 1, s + 1, a, d)
            t, s, a, d = dp[i - 1][j]
            if t + 1 < best[0]:
                best = (t + 1, s, a, d + 1)
            t, s, a, d = dp[i][j - 1]
            if t + 1 < best[0]:
                best = (t + 1, s, a + 1, d)
            dp[i][j] = best
    total, s, a, d = dp[n][m]
    assert total == s + a + d
    return EditCounts(sub=s, ins=a, dele=d)


def _as_units(entry, char_level: bool) -> List:
    if char_level:
        if isinstance(entry, str):
            return [c for c in entry if not c.isspace()]
        return [c for tok in entry for c in str(tok)]
    if isinstance(entry, str):
        return entry.split()
    return list(entry)


def _corpus_rate(refs: Sequence, hyps: Sequence, char_level: bool) -> float:
    if len(refs) != len(hyps):
        raise DataError(f"{len(refs)} references for {len(hyps)} hypotheses")
    total_err = 0
    total_len = 0
    for ref, hyp in zip(refs, hyps):
        r = _as_units(ref, char_level)
        h = _as_units(hyp, char_level)
        total_err += edit_distance(r, h).errors
        total_len += len(r)
    if total_len == 0:
        raise DataError("empty reference corpus")
    return total_err / total_len


def wer(refs: Sequence, hyps: Sequence) -> float:
    """Corpus rate over word tokens: summed errors / summed ref lengths."""
    return _corpus_rate(refs, hyps, char_level=False)


def cer(refs: Sequence, hyps: Sequence) -> float:
    """Corpus rate over characters (whitespace ignored in strings)."""
    return _corpus_rate(refs, hyps, char_level=True)


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(refs: Sequence[Sequence], hyps: Sequence[Sequence],
         max_n: int = 4) -> float:
    """Corpus BLEU in [0, 1]: clipped n-gram precisions with add-1
    smoothing for n >= 2, geometric mean, brevity penalty."""
    if len(refs) != len(hyps):
        raise DataError(f"{len(refs)} references for {len(hyps)} hypotheses")
    if not refs:
        raise DataError("empty corpus")
    matched = [0] * max_n
    predicted = [0] * max_n
    ref_len = 0
    hyp_len = 0
    for ref, hyp in zip(refs, hyps):
        ref = _as_units(ref, char_level=False)
        hyp = _as_units(hyp, char_level=False)
        ref_len += len(ref)
        hyp_len += len(hyp)
        for n in range(1, max_n + 1):
            hyp_counts = _ngrams(hyp, n)
            ref_counts = _ngrams(ref, n)
            predicted[n - 1] += sum(hyp_counts.values())
            matched[n - 1] += sum(min(c, ref_counts[g])
                                  for g, c in hyp_counts.items())
    if hyp_len == 0 or matched[0] == 0:
        return 0.0
    log_prec = 0.0
    for n in range(1, max_n + 1):
        num, den = matched[n - 1], predicted[n - 1]
        if n >= 2:
            num, den = num + 1, den + 1
        if num == 0 or den == 0:
            return 0.0
        log_prec += math.log(num / den)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_prec / max_n)
