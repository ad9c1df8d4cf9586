################################################################################
"""
ICFT - Incremental curriculum fine-tuning for small medical language models.

Text-generation and classification measures: ROUGE-1, ROUGE-L (F1 with
beta = 1, precision and recall reported alongside), distinct-n and exact
match accuracy. Scores are only comparable within this package because the
tokenizer is a plain lowercase whitespace split.

(c) 2025 Stanley Solutions
"""
################################################################################

from collections import Counter
from typing import NamedTuple, Optional, Sequence, Union

from pydantic import BaseModel, Field

from icft.errors import MetricError

ROUGE_VARIANT = "f1 (beta=1), clipped counts, lowercase whitespace tokens"

TextLike = Union[str, Sequence[str]]


class TokenizedText(NamedTuple):
    """A string and its lowercase whitespace tokens."""

    original: str
    tokens: tuple[str, ...]


def tokenize(text: str) -> TokenizedText:
    """Lowercase and split on whitespace; punctuation stays attached."""
    return TokenizedText(text, tuple(text.lower().split()))


def _tokens(text: TextLike) -> tuple[str, ...]:
    if isinstance(text, str):
        return tokenize(text).tokens
    return tuple(text)


class RougeScore(NamedTuple):
    """Precision, recall and F1 of one comparison."""

    precision: float
    recall: float
    f1: float


def _score(matches: int, candidate_len: int, reference_len: int) -> RougeScore:
    precision = matches / candidate_len if candidate_len else 0.0
    recall = matches / reference_len
    if precision + recall == 0:
        return RougeScore(precision, recall, 0.0)
    return RougeScore(
        precision, recall, 2 * precision * recall / (precision + recall)
    )


def rouge_1(candidate: TextLike, reference: TextLike) -> RougeScore:
    """Clipped unigram overlap."""
    cand, ref = _tokens(candidate), _tokens(reference)
    if not ref:
        raise MetricError("ROUGE needs a nonempty reference")
    overlap = sum((Counter(cand) & Counter(ref)).values())
    return _score(overlap, len(cand), len(ref))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Longest common subsequence length by dynamic programming."""
    if not a or not b:
        return 0
    previous = [0] * (len(b) + 1)
    for token in a:
        current = [0]
        for j, other in enumerate(b, start=1):
            if token == other:
                current.append(previous[j - 1] + 1)
            else:
                current.append(max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def rouge_l(candidate: TextLike, reference: TextLike) -> RougeScore:
    """Longest-common-subsequence precision, recall and F1."""
    cand, ref = _tokens(candidate), _tokens(reference)
    if not ref:
        raise MetricError("ROUGE needs a nonempty reference")
    return _score(lcs_length(cand, ref), len(cand), len(ref))


def _ngrams(tokens: Sequence[str], n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def distinct_n(
    texts: Sequence[TextLike],
    n: int,
    per_response: bool = False,
) -> float:
    """Share of unique n-grams among all generated n-grams.

    By default n-grams are pooled over every text; with `per_response` the
    ratio is computed per text and averaged over texts that have n-grams.
    """
    if n < 1:
        raise MetricError(f"distinct-n needs n >= 1, got {n}")
    grams = [_ngrams(_tokens(text), n) for text in texts]
    if per_response:
        ratios = [len(set(g)) / len(g) for g in grams if g]
        return sum(ratios) / len(ratios) if ratios else 0.0
    pooled = [gram for group in grams for gram in group]
    if not pooled:
        return 0.0
    return len(set(pooled)) / len(pooled)


def classification_accuracy(
    predictions: Sequence[str],
    labels: Sequence[str],
) -> float:
    """Exact-match fraction."""
    if len(predictions) != len(labels):
        raise MetricError(
            f"{len(predictions)} predictions for {len(labels)} labels"
        )
    if not labels:
        raise MetricError("accuracy over an empty set is undefined")
    hits = sum(p == label for p, label in zip(predictions, labels))
    return hits / len(labels)


class MetricReport(BaseModel):
    """Aggregate scores of one evaluation run."""

    rouge1_precision: float = Field(ge=0, le=1)
    rouge1_recall: float = Field(ge=0, le=1)
    rouge1_f: float = Field(ge=0, le=1)
    rougeL_precision: float = Field(ge=0, le=1)
    rougeL_recall: float = Field(ge=0, le=1)
    rougeL_f: float = Field(ge=0, le=1)
    distinct1: float = Field(ge=0, le=1)
    distinct2: float = Field(ge=0, le=1)
    accuracy: Optional[float] = Field(default=None, ge=0, le=1)
    examples: int
    generated_tokens: int
    rouge_variant: str = ROUGE_VARIANT


def score_responses(
    candidates: Sequence[str],
    references: Sequence[str],
    predicted_labels: Optional[Sequence[str]] = None,
    labels: Optional[Sequence[str]] = None,
    per_response_distinct: bool = False,
) -> MetricReport:
    """Macro-average ROUGE over pairs and pool distinct-n over candidates."""
    if len(candidates) != len(references):
        raise MetricError(
            f"{len(candidates)} candidates for {len(references)} references"
        )
    if not references:
        raise MetricError("cannot score an empty evaluation set")
    r1 = [rouge_1(c, r) for c, r in zip(candidates, references)]
    rl = [rouge_l(c, r) for c, r in zip(candidates, references)]
    count = len(references)

    def avg(scores, field):
        return sum(getattr(s, field) for s in scores) / count

    accuracy = None
    if labels:
        accuracy = classification_accuracy(predicted_labels or [], labels)
    return MetricReport(
        rouge1_precision=avg(r1, "precision"),
        rouge1_recall=avg(r1, "recall"),
        rouge1_f=avg(r1, "f1"),
        rougeL_precision=avg(rl, "precision"),
        rougeL_recall=avg(rl, "recall"),
        rougeL_f=avg(rl, "f1"),
        distinct1=distinct_n(candidates, 1, per_response_distinct),
        distinct2=distinct_n(candidates, 2, per_response_distinct),
        accuracy=accuracy,
        examples=count,
        generated_tokens=sum(len(_tokens(c)) for c in candidates),
    )
