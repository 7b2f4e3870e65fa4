import itertools
import math
from collections import Counter

import numpy as np
import pytest

from daspl.errors import ContractError
from daspl.metrics import (
    TokenizedPair,
    bleu_n,
    cider,
    cider_pair,
    document_frequencies,
    lcs_length,
    rouge_l,
    score_corpus,
)

CAT = TokenizedPair.from_text("the cat sat on the mat", ["the cat is on the mat"])


def _relabel(pair, suffix="_x"):
    return TokenizedPair(
        tuple(t + suffix for t in pair.candidate),
        tuple(tuple(t + suffix for t in ref) for ref in pair.references),
    )


def _brute_lcs(a, b):
    for size in range(min(len(a), len(b)), 0, -1):
        subs = set(itertools.combinations(b, size))
        if any(c in subs for c in itertools.combinations(a, size)):
            return size
    return 0


def _grams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _cider_oracle(corpus):
    size = len(corpus)
    per_pair = []
    for pair in corpus:
        total = 0.0
        for n in range(1, 5):
            df = Counter()
            for other in corpus:
                df.update({g for ref in other.references for g in _grams(ref, n)})
            cand = _grams(pair.candidate, n)
            sims = []
            for ref in pair.references:
                refg = _grams(ref, n)
                keys = sorted(set(cand) | set(refg))
                weight = np.array([math.log(size) - math.log(max(1, df[k])) for k in keys])
                u = np.array([cand[k] for k in keys], dtype=float) * weight
                v = np.array([refg[k] for k in keys], dtype=float) * weight
                denom = np.linalg.norm(u) * np.linalg.norm(v)
                cos = float(u @ v / denom) if denom > 0 else 0.0
                delta = len(pair.candidate) - len(ref)
                sims.append(math.exp(-delta * delta / 72.0) * cos)
            total += np.mean(sims)
        per_pair.append(10.0 * total / 4)
    return float(np.mean(per_pair))


class TestBleu:
    def test_perfect_match(self):
        pair = TokenizedPair.from_text("large optic disc with pale rim", ["large optic disc with pale rim"])
        for n in range(1, 5):
            assert bleu_n(pair, n) == pytest.approx(1.0)

    def test_no_overlap(self):
        pair = TokenizedPair.from_text("alpha beta", ["gamma delta"])
        assert bleu_n(pair, 1) == 0.0
        assert bleu_n(pair, 4) == 0.0

    def test_brevity_penalty(self):
        pair = TokenizedPair.from_text("the cat sat", ["the cat sat down"])
        assert bleu_n(pair, 1) == pytest.approx(math.exp(1 - 4 / 3), abs=1e-12)
        assert round(bleu_n(pair, 1), 4) == 0.7165

    def test_hand_counted_orders(self):
        assert bleu_n(CAT, 1) == pytest.approx(5 / 6)
        assert bleu_n(CAT, 2) == pytest.approx(math.sqrt(5 / 6 * 3 / 5))
        assert bleu_n(CAT, 3) == pytest.approx(0.5)
        assert bleu_n(CAT, 4) == pytest.approx((5 / 6 * 3 / 5 * 1 / 4 * 1 / 4) ** 0.25)

    def test_non_increasing_in_order(self):
        scores = [bleu_n(CAT, n) for n in range(1, 5)]
        assert scores == sorted(scores, reverse=True)

    def test_clipping(self):
        pair = TokenizedPair.from_text("the the the", ["the cat"])
        assert bleu_n(pair, 1) == pytest.approx(1 / 3)

    def test_empty_candidate_and_bad_order(self):
        assert bleu_n(TokenizedPair((), (("a",),)), 2) == 0.0
        with pytest.raises(ContractError):
            bleu_n(CAT, 5)


class TestRouge:
    def test_anchor(self):
        assert rouge_l(TokenizedPair.from_text("a b c d", ["a c d e"])) == pytest.approx(0.75)

    def test_identical_and_disjoint(self):
        assert rouge_l(TokenizedPair.from_text("a b c", ["a b c"])) == pytest.approx(1.0)
        assert rouge_l(TokenizedPair.from_text("a b c", ["x y z"])) == 0.0

    def test_lcs_matches_brute_force(self, rng):
        for _ in range(40):
            a = [str(x) for x in rng.integers(0, 4, size=int(rng.integers(0, 7)))]
            b = [str(x) for x in rng.integers(0, 4, size=int(rng.integers(0, 7)))]
            assert lcs_length(a, b) == _brute_lcs(a, b)

    def test_symmetric_when_beta_is_one(self, rng):
        for _ in range(20):
            a = tuple(str(x) for x in rng.integers(0, 5, size=6))
            b = tuple(str(x) for x in rng.integers(0, 5, size=4))
            forward = rouge_l(TokenizedPair(a, (b,)), beta2=1.0)
            backward = rouge_l(TokenizedPair(b, (a,)), beta2=1.0)
            assert forward == pytest.approx(backward)

    def test_best_reference_wins(self):
        pair = TokenizedPair.from_text("a b c", ["x y z", "a b c"])
        assert rouge_l(pair) == pytest.approx(1.0)


class TestCider:
    def test_shared_sentence_scores_zero(self):
        corpus = [TokenizedPair.from_text(c, ["pale rim large disc"]) for c in ("pale rim", "large disc now", "x")]
        assert cider(corpus) == 0.0

    def test_self_match_in_disjoint_corpus(self):
        sentences = ["a b c d e", "f g h i j", "k l m n o"]
        corpus = [TokenizedPair.from_text(s, [s]) for s in sentences]
        dfs = document_frequencies(corpus)
        assert cider_pair(corpus[0], dfs, len(corpus)) == pytest.approx(1.0)
        assert cider(corpus) == pytest.approx(10.0)

    def test_matches_independent_oracle(self):
        corpus = [
            TokenizedPair.from_text("large optic disc with pale rim", ["large optic disc with rim pallor", "pale rim seen"]),
            TokenizedPair.from_text("small disc healthy rim", ["small optic disc with healthy rim"]),
            TokenizedPair.from_text("high risk of glaucoma", ["low risk of glaucoma with small disc"]),
        ]
        assert cider(corpus) == pytest.approx(_cider_oracle(corpus), abs=1e-6)

    def test_single_document(self):
        assert cider([TokenizedPair.from_text("a b", ["a b"])]) == 0.0

    def test_empty_corpus(self):
        with pytest.raises(ContractError):
            cider([])


class TestScoreCorpus:
    def _corpus(self):
        return [
            TokenizedPair.from_text("large optic disc with pale rim", ["large optic disc with pale rim"]),
            TokenizedPair.from_text("small disc healthy rim", ["small optic disc with healthy rim"]),
            TokenizedPair.from_text("the cat sat on the mat", ["the cat is on the mat"]),
        ]

    def test_ranges(self):
        report = score_corpus(self._corpus())
        for value in (report.b1, report.b2, report.b3, report.b4, report.rouge_l):
            assert 0.0 <= value <= 1.0
        assert report.cider >= 0.0
        assert set(report.as_percent()) == {"B-1", "B-2", "B-3", "B-4", "ROU", "CID"}

    def test_threads_match_serial(self):
        assert score_corpus(self._corpus(), jobs=4) == score_corpus(self._corpus(), jobs=1)

    def test_relabel_invariance(self):
        corpus = self._corpus()
        assert score_corpus([_relabel(p) for p in corpus]) == score_corpus(corpus)

    def test_validation(self):
        with pytest.raises(ContractError):
            score_corpus([])
        with pytest.raises(ContractError):
            TokenizedPair(("a",), ())
