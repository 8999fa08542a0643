"""CIDEr-D and BLEU caption metrics.

Captions are sequences of hashable tokens (words or ids) without sos/eos
markers. CIDEr-D follows the usual definition: tf-idf weighted n-gram vectors
(n = 1..4), clipped cosine similarity against each reference, a gaussian
length penalty with sigma = 6, averaged over references and n-gram orders and
scaled by 10.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

import numpy as np

from .errors import ContractError

Caption = Sequence[Hashable]

MAX_N = 4
SIGMA = 6.0


def ngrams(tokens: Caption, n: int) -> Counter:
    tokens = tuple(tokens)
    return Counter(tokens[i : i + n] for i in range(len(tokens) - n + 1))


def _all_ngrams(tokens: Caption, max_n: int = MAX_N) -> list[Counter]:
    return [ngrams(tokens, n) for n in range(1, max_n + 1)]


@dataclass(frozen=True)
class NGramStats:
    """Document frequencies of n-grams over a reference corpus."""

    document_frequency: dict = field(repr=False)
    corpus_size: int
    max_n: int = MAX_N

    def idf(self, gram: tuple) -> float:
        return math.log(self.corpus_size / max(1.0, self.document_frequency.get(gram, 0)))


def build_idf(reference_corpus: Iterable[Sequence[Caption]], max_n: int = MAX_N) -> NGramStats:
    """Count, for every n-gram, how many images have it in some reference."""
    df: Counter = Counter()
    size = 0
    for refs in reference_corpus:
        size += 1
        present = set()
        for ref in refs:
            for counts in _all_ngrams(ref, max_n):
                present.update(counts)
        df.update(present)
    if size == 0:
        raise ContractError("cannot build idf statistics from an empty corpus")
    return NGramStats(dict(df), size, max_n)


def _tfidf(tokens: Caption, stats: NGramStats) -> tuple[list[dict], np.ndarray]:
    vecs, norms = [], np.zeros(stats.max_n)
    for n, counts in enumerate(_all_ngrams(tokens, stats.max_n)):
        vec = {g: c * stats.idf(g) for g, c in counts.items()}
        vecs.append(vec)
        norms[n] = math.sqrt(sum(v * v for v in vec.values()))
    return vecs, norms


def cider_d(candidate: Caption, refs: Sequence[Caption], stats: NGramStats, sigma: float = SIGMA) -> float:
    """CIDEr-D score of one candidate in [0, 10]."""
    if len(candidate) == 0 or len(refs) == 0:
        return 0.0
    cand_vec, cand_norm = _tfidf(candidate, stats)
    total = np.zeros(stats.max_n)
    for ref in refs:
        ref_vec, ref_norm = _tfidf(ref, stats)
        penalty = math.exp(-((len(candidate) - len(ref)) ** 2) / (2.0 * sigma**2))
        for n in range(stats.max_n):
            if cand_norm[n] == 0.0 or ref_norm[n] == 0.0:
                continue
            dot = sum(min(v, ref_vec[n].get(g, 0.0)) * ref_vec[n].get(g, 0.0) for g, v in cand_vec[n].items())
            total[n] += penalty * dot / (cand_norm[n] * ref_norm[n])
    return float(10.0 * np.mean(total / len(refs)))


def corpus_cider_d(
    candidates: Sequence[Caption], references: Sequence[Sequence[Caption]], stats: NGramStats | None = None
) -> tuple[float, list[float]]:
    """Mean CIDEr-D over images; idf defaults to the given references."""
    if len(candidates) != len(references):
        raise ContractError(f"{len(candidates)} candidates for {len(references)} reference sets")
    stats = stats or build_idf(references)
    scores = [cider_d(c, r, stats) for c, r in zip(candidates, references)]
    return (float(np.mean(scores)) if scores else 0.0), scores


def _closest_ref_len(c_len: int, refs: Sequence[Caption]) -> int:
    return min((abs(len(r) - c_len), len(r)) for r in refs)[1]


def _clipped_counts(candidate: Caption, refs: Sequence[Caption], k: int) -> tuple[int, int]:
    cand = ngrams(candidate, k)
    max_ref: Counter = Counter()
    for ref in refs:
        for g, c in ngrams(ref, k).items():
            max_ref[g] = max(max_ref[g], c)
    matched = sum(min(c, max_ref[g]) for g, c in cand.items())
    return matched, max(len(candidate) - k + 1, 0)


def bleu_n(candidate: Caption, refs: Sequence[Caption], n: int = 4) -> float:
    """Sentence BLEU-n: clipped precisions, geometric mean, brevity penalty."""
    if len(candidate) == 0 or len(refs) == 0:
        return 0.0
    log_p = 0.0
    for k in range(1, n + 1):
        matched, total = _clipped_counts(candidate, refs, k)
        if matched == 0 or total == 0:
            return 0.0
        log_p += math.log(matched / total)
    c = len(candidate)
    r = _closest_ref_len(c, refs)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p / n)


def corpus_bleu(candidates: Sequence[Caption], references: Sequence[Sequence[Caption]], n: int = 4) -> float:
    """Corpus BLEU-n with counts pooled over all images."""
    matched = np.zeros(n)
    totals = np.zeros(n)
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        for k in range(1, n + 1):
            m, t = _clipped_counts(cand, refs, k)
            matched[k - 1] += m
            totals[k - 1] += t
        c_len += len(cand)
        r_len += _closest_ref_len(len(cand), refs)
    if c_len == 0 or np.any(matched == 0):
        return 0.0
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return float(bp * math.exp(np.mean(np.log(matched / totals))))
