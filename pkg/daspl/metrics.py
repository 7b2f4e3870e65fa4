"""
Metrics Module

Corpus text-generation metrics for generated reports: BLEU-1..4 with clipped
counts, add-one smoothing and a brevity penalty; ROUGE-L from the longest
common subsequence; CIDEr with TF-IDF n-gram vectors and a Gaussian length
penalty.
"""

import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from daspl.errors import ContractError
from daspl.text import tokenize

logger = logging.getLogger(__name__)

ROUGE_BETA2 = 1.2 ** 2
CIDER_SIGMA = 6.0
CIDER_SCALE = 10.0
CIDER_MAX_N = 4


@dataclass(frozen=True)
class TokenizedPair:
    candidate: Tuple[str, ...]
    references: Tuple[Tuple[str, ...], ...]

    def __post_init__(self):
        if len(self.references) == 0:
            raise ContractError("a scored pair needs at least one reference")

    @classmethod
    def from_text(cls, candidate: str, references: Sequence[str]) -> "TokenizedPair":
        return cls(tuple(tokenize(candidate)), tuple(tuple(tokenize(r)) for r in references))


@dataclass(frozen=True)
class MetricReport:
    b1: float
    b2: float
    b3: float
    b4: float
    rouge_l: float
    cider: float

    def as_percent(self) -> Dict[str, float]:
        return {
            "B-1": round(self.b1 * 100, 2),
            "B-2": round(self.b2 * 100, 2),
            "B-3": round(self.b3 * 100, 2),
            "B-4": round(self.b4 * 100, 2),
            "ROU": round(self.rouge_l * 100, 2),
            "CID": round(self.cider * 100, 2),
        }

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ==================== BLEU ====================

def _closest_ref_length(candidate_len: int, references: Sequence[Sequence[str]]) -> int:
    return min((abs(len(r) - candidate_len), len(r)) for r in references)[1]


def bleu_n(pair: TokenizedPair, n: int) -> float:
    """
    Sentence BLEU-n.

    Clipped k-gram precisions for k = 1..n are combined by geometric mean.
    Orders with no candidate k-grams, and orders k ≥ 2 with no matches, get
    add-one smoothing. No unigram match at all scores 0.

    Examples:
        >>> pair = TokenizedPair.from_text("the cat sat", ["the cat sat down"])
        >>> round(bleu_n(pair, 1), 4)
        0.7165
    """
    if not 1 <= n <= 4:
        raise ContractError(f"BLEU order must lie in [1, 4], got {n}")
    candidate = pair.candidate
    if len(candidate) == 0:
        return 0.0
    log_sum = 0.0
    for k in range(1, n + 1):
        cand_counts = ngrams(candidate, k)
        max_ref = Counter()
        for ref in pair.references:
            for gram, count in ngrams(ref, k).items():
                max_ref[gram] = max(max_ref[gram], count)
        matches = sum(min(count, max_ref[gram]) for gram, count in cand_counts.items())
        total = sum(cand_counts.values())
        if k == 1 and matches == 0:
            return 0.0
        if total == 0 or matches == 0:
            matches, total = matches + 1, total + 1
        log_sum += math.log(matches / total)
    c = len(candidate)
    r = _closest_ref_length(c, pair.references)
    penalty = 1.0 if c >= r else math.exp(1.0 - r / c)
    return penalty * math.exp(log_sum / n)


# ==================== ROUGE-L ====================

def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        row = [0]
        for j, y in enumerate(b, start=1):
            row.append(prev[j - 1] + 1 if x == y else max(prev[j], row[j - 1]))
        prev = row
    return prev[-1]


def rouge_l(pair: TokenizedPair, beta2: float = ROUGE_BETA2) -> float:
    """
    LCS F-measure, maximised over references.

    Examples:
        >>> rouge_l(TokenizedPair.from_text("a b c d", ["a c d e"]))
        0.75
    """
    if len(pair.candidate) == 0:
        return 0.0
    best = 0.0
    for ref in pair.references:
        lcs = lcs_length(pair.candidate, ref)
        if lcs == 0 or len(ref) == 0:
            continue
        precision = lcs / len(pair.candidate)
        recall = lcs / len(ref)
        best = max(best, (1 + beta2) * precision * recall / (recall + beta2 * precision))
    return best


# ==================== CIDEr ====================

def _tfidf(counts: Counter, idf: Dict[tuple, float]) -> Dict[tuple, float]:
    return {gram: count * idf.get(gram, 0.0) for gram, count in counts.items()}


def _cosine(u: Dict[tuple, float], v: Dict[tuple, float]) -> float:
    norm_u = math.sqrt(sum(x * x for x in u.values()))
    norm_v = math.sqrt(sum(x * x for x in v.values()))
    if norm_u == 0.0 or norm_v == 0.0:
        return 0.0
    return sum(x * v.get(g, 0.0) for g, x in u.items()) / (norm_u * norm_v)


def document_frequencies(corpus: Sequence[TokenizedPair]) -> List[Counter]:
    """Per order n, the number of pairs whose references contain each n-gram."""
    dfs = [Counter() for _ in range(CIDER_MAX_N)]
    for pair in corpus:
        for n in range(1, CIDER_MAX_N + 1):
            seen = set()
            for ref in pair.references:
                seen.update(ngrams(ref, n))
            dfs[n - 1].update(seen)
    return dfs


def cider_pair(pair: TokenizedPair, dfs: Sequence[Counter], corpus_size: int) -> float:
    """Unscaled CIDEr of one pair: mean over n and references of penalty × cosine."""
    log_n = math.log(float(corpus_size))
    total = 0.0
    for n in range(1, CIDER_MAX_N + 1):
        df = dfs[n - 1]
        cand = ngrams(pair.candidate, n)
        idf = {g: log_n - math.log(max(1.0, float(df[g]))) for g in cand}
        cand_vec = _tfidf(cand, idf)
        per_ref = 0.0
        for ref in pair.references:
            ref_counts = ngrams(ref, n)
            ref_idf = {g: log_n - math.log(max(1.0, float(df[g]))) for g in ref_counts}
            ref_vec = _tfidf(ref_counts, ref_idf)
            delta = len(pair.candidate) - len(ref)
            penalty = math.exp(-(delta * delta) / (2.0 * CIDER_SIGMA ** 2))
            per_ref += penalty * _cosine(cand_vec, ref_vec)
        total += per_ref / len(pair.references)
    return total / CIDER_MAX_N


def cider(corpus: Sequence[TokenizedPair]) -> float:
    """
    Corpus CIDEr: mean over pairs of 10 × ``cider_pair``.

    Document frequencies come from the reference side of the corpus and are
    floored at 1, so a one-document corpus scores 0 rather than failing.
    """
    if len(corpus) == 0:
        raise ContractError("CIDEr needs a nonempty corpus")
    dfs = document_frequencies(corpus)
    scores = [CIDER_SCALE * cider_pair(pair, dfs, len(corpus)) for pair in corpus]
    return float(np.mean(scores))


# ==================== Corpus report ====================

def _sentence_scores(pair: TokenizedPair) -> Tuple[float, ...]:
    return tuple(bleu_n(pair, n) for n in range(1, 5)) + (rouge_l(pair),)


def score_corpus(corpus: Sequence[TokenizedPair], jobs: int = 1) -> MetricReport:
    """
    BLEU-1..4 and ROUGE-L averaged over pairs, plus corpus CIDEr.

    ``jobs > 1`` scores pairs on a thread pool; ``map`` keeps input order so
    the result equals the serial one.
    """
    if len(corpus) == 0:
        raise ContractError("cannot score an empty corpus")
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sentence_scores, corpus))
    else:
        rows = [_sentence_scores(pair) for pair in corpus]
    means = np.mean(np.array(rows), axis=0)
    report = MetricReport(
        b1=float(means[0]), b2=float(means[1]), b3=float(means[2]), b4=float(means[3]),
        rouge_l=float(means[4]), cider=cider(corpus),
    )
    logger.debug("scored %d pairs: %s", len(corpus), report.as_percent())
    return report
