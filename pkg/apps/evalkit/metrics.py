"""
Word error rate and the sentence-level significance test.

``wer`` aligns by minimal word edit distance with unit costs. When several
alignments are optimal the traceback prefers substitution (or match), then
deletion, then insertion, so the S/D/I split is deterministic.
"""
import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm, rankdata

logger = logging.getLogger(__name__)

EXACT_MAX_N = 12
MIN_DIFFERENCES = 5


class EvaluationError(ValueError):
    """Raised when a metric is undefined for its input."""


@dataclass(frozen=True)
class WerBreakdown:
    substitutions: int
    deletions: int
    insertions: int
    ref_words: int

    @property
    def errors(self):
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self):
        return self.errors / self.ref_words if self.ref_words else math.inf

    def __add__(self, other):
        return WerBreakdown(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.ref_words + other.ref_words,
        )


def edit_table(ref, hyp):
    table = np.zeros((len(ref) + 1, len(hyp) + 1), dtype=np.int64)
    table[:, 0] = np.arange(len(ref) + 1)
    table[0, :] = np.arange(len(hyp) + 1)
    for i in range(1, len(ref) + 1):
        for j in range(1, len(hyp) + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            table[i, j] = min(table[i - 1, j - 1] + cost, table[i - 1, j] + 1, table[i, j - 1] + 1)
    return table


def wer(reference, hypothesis):
    ref, hyp = reference.split(), hypothesis.split()
    if not ref:
        raise EvaluationError("reference has no words")
    table = edit_table(ref, hyp)
    i, j = len(ref), len(hyp)
    subs = dels = ins = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            if table[i, j] == table[i - 1, j - 1] + cost:
                subs += cost
                i, j = i - 1, j - 1
                continue
        if i > 0 and table[i, j] == table[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return WerBreakdown(subs, dels, ins, len(ref))


def pooled(breakdowns):
    """Sum of counts; its ``wer`` is the corpus-level rate."""
    breakdowns = list(breakdowns)
    if not breakdowns:
        raise EvaluationError("no sentences to pool")
    total = breakdowns[0]
    for b in breakdowns[1:]:
        total = total + b
    return total


def corpus_wer(references, hypotheses):
    return pooled(wer(r, h) for r, h in zip(references, hypotheses, strict=True)).wer


### SIGNIFICANCE

@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    significant: bool
    n: int
    exact: bool


def signed_ranks(a, b):
    diffs = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    diffs = diffs[diffs != 0]
    return rankdata(np.abs(diffs)), diffs > 0


def exact_p_value(ranks, w_plus):
    """Two-sided p from the full sign-flip null distribution."""
    n = len(ranks)
    signs = np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.float64)
    null = signs @ ranks
    centre = ranks.sum() / 2
    extreme = np.abs(null - centre) >= abs(w_plus - centre) - 1e-9
    return float(extreme.mean())


def normal_p_value(ranks, w_plus):
    n = len(ranks)
    _, ties = np.unique(ranks, return_counts=True)
    variance = n * (n + 1) * (2 * n + 1) / 24 - np.sum(ties ** 3 - ties) / 48
    if variance <= 0:
        return 1.0
    z = (w_plus - n * (n + 1) / 4) / math.sqrt(variance)
    return float(min(1.0, 2 * norm.sf(abs(z))))


def wilcoxon_signed_rank(a, b, alpha=0.05):
    """
    Paired two-sided signed-rank test. Zero differences are dropped and tied
    magnitudes share their mean rank. Exact for up to 12 differences, normal
    approximation with tie correction above that.
    """
    if len(a) != len(b):
        raise EvaluationError(f"paired samples differ in length: {len(a)} vs {len(b)}")
    ranks, positive = signed_ranks(a, b)
    n = len(ranks)
    if n < MIN_DIFFERENCES:
        raise EvaluationError(f"need at least {MIN_DIFFERENCES} non-zero differences, got {n}")
    w_plus = float(ranks[positive].sum())
    w_minus = float(ranks[~positive].sum())
    exact = n <= EXACT_MAX_N
    p_value = exact_p_value(ranks, w_plus) if exact else normal_p_value(ranks, w_plus)
    return WilcoxonResult(min(w_plus, w_minus), p_value, p_value < alpha, n, exact)


### LENGTH BUCKETS

@dataclass(frozen=True)
class BucketRow:
    max_ref_words: float
    sentences: int
    breakdown: WerBreakdown

    @property
    def wer(self):
        return self.breakdown.wer


def bucket_wer_by_ref_length(pairs, bucket_edges):
    """
    ``pairs`` of (reference, hypothesis). Each pair goes to the first bucket
    whose edge is at least its reference word count; longer pairs land in a
    final overflow bucket with edge ``inf``. Empty buckets are omitted.
    """
    edges = list(bucket_edges)
    if not edges or any(b <= a for a, b in zip(edges, edges[1:])):
        raise EvaluationError(f"bucket edges must be non-empty and strictly increasing: {edges}")
    edges.append(math.inf)
    buckets = {edge: [] for edge in edges}
    for reference, hypothesis in pairs:
        breakdown = wer(reference, hypothesis)
        edge = next(e for e in edges if e >= breakdown.ref_words)
        buckets[edge].append(breakdown)
    return [BucketRow(edge, len(items), pooled(items)) for edge, items in buckets.items() if items]
