from itertools import combinations

import numpy as np
import pytest

from icft.errors import MetricError
from icft.metrics import (
    classification_accuracy,
    distinct_n,
    lcs_length,
    rouge_1,
    rouge_l,
    score_responses,
    tokenize,
)


def _brute_force_lcs(a, b):
    for size in range(min(len(a), len(b)), 0, -1):
        subsequences = {tuple(a[i] for i in idx)
                        for idx in combinations(range(len(a)), size)}
        for idx in combinations(range(len(b)), size):
            if tuple(b[i] for i in idx) in subsequences:
                return size
    return 0


def test_tokenize_lowercases_and_splits_on_whitespace():
    assert tokenize("Take  Fluids,\tREST").tokens == ("take", "fluids,", "rest")


def test_rouge_1_example():
    score = rouge_1("the cat sat", "the cat sat on the mat")
    assert score.precision == 1.0
    assert score.recall == 0.5
    assert score.f1 == pytest.approx(2 / 3)


def test_rouge_1_clips_repeated_tokens():
    score = rouge_1("the the the", "the cat")
    assert score.precision == pytest.approx(1 / 3)
    assert score.recall == 0.5


def test_single_substitution_scores_two_thirds():
    assert rouge_1("the cat sat", "the cat ate").f1 == pytest.approx(2 / 3)
    assert rouge_l("the cat sat", "the cat ate").f1 == pytest.approx(2 / 3)
    assert distinct_n([["a", "a", "b"]], 1) == pytest.approx(2 / 3)


def test_rouge_l_example():
    score = rouge_l("the cat on mat", "the cat sat on the mat")
    assert score.precision == 1.0
    assert score.recall == pytest.approx(4 / 6)
    assert score.f1 == pytest.approx(0.8)


def test_identical_text_scores_one_and_disjoint_zero():
    for metric in (rouge_1, rouge_l):
        assert metric("rest and fluids", "rest and fluids").f1 == 1.0
        assert metric("cough", "rest and fluids").f1 == 0.0


def test_empty_candidate_scores_zero():
    assert rouge_1("", "rest").f1 == 0.0
    assert rouge_l("", "rest").precision == 0.0


def test_empty_reference_is_an_error():
    with pytest.raises(MetricError):
        rouge_1("rest", "")
    with pytest.raises(MetricError):
        rouge_l("rest", "   ")


def test_lcs_matches_brute_force_on_random_sequences():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        a = list(rng.choice(list("abc"), size=int(rng.integers(0, 9))))
        b = list(rng.choice(list("abc"), size=int(rng.integers(0, 9))))
        assert lcs_length(a, b) == _brute_force_lcs(a, b), (a, b)


def test_distinct_n_pools_by_default():
    texts = ["a b a", "a b"]
    assert distinct_n(texts, 1) == pytest.approx(2 / 5)
    assert distinct_n(texts, 2) == pytest.approx(2 / 4)
    assert distinct_n(texts, 1, per_response=True) == pytest.approx(
        (2 / 3 + 1.0) / 2
    )


def test_distinct_n_without_ngrams_is_zero():
    assert distinct_n(["a"], 2) == 0.0
    assert distinct_n([], 1) == 0.0
    with pytest.raises(MetricError):
        distinct_n(["a"], 0)


def test_classification_accuracy():
    assert classification_accuracy(["x", "y", "x"], ["x", "x", "x"]) == (
        pytest.approx(2 / 3)
    )
    with pytest.raises(MetricError):
        classification_accuracy(["x"], ["x", "y"])
    with pytest.raises(MetricError):
        classification_accuracy([], [])


def test_score_responses_macro_averages():
    report = score_responses(
        ["the cat sat", "rest"],
        ["the cat sat on the mat", "rest"],
        predicted_labels=["concise", "detailed"],
        labels=["concise", "concise"],
    )
    assert report.rouge1_f == pytest.approx((2 / 3 + 1.0) / 2)
    assert report.accuracy == 0.5
    assert report.examples == 2
    assert report.generated_tokens == 4


def test_score_responses_without_labels_has_no_accuracy():
    report = score_responses(["rest"], ["rest"])
    assert report.accuracy is None
    with pytest.raises(MetricError):
        score_responses([], [])
    with pytest.raises(MetricError):
        score_responses(["a"], ["a", "b"])
