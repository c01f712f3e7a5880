"""Evaluation metrics for released answers.

All scores lie in [0, 100]. ROUGE variants compare word tokens (lowercased,
split on non-alphanumerics, nothing filtered); Levenshtein similarity
compares characters.
"""

from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass, field

import Levenshtein
import numpy as np

from src.privicl.core.text import word_tokens

GENERATION_METRICS = ("rouge1", "rouge2", "rougeL", "levenshtein")


def _f1(overlap: int, n_candidate: int, n_reference: int) -> float:
    if n_candidate == 0 and n_reference == 0:
        return 100.0
    if overlap == 0:
        return 0.0
    precision = overlap / n_candidate
    recall = overlap / n_reference
    return 100.0 * 2 * precision * recall / (precision + recall)


def _ngrams(tokens: list[str], n: int) -> Counter[tuple[str, ...]]:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _rouge_n(candidate: str, reference: str, n: int) -> float:
    cand = _ngrams(word_tokens(candidate), n)
    ref = _ngrams(word_tokens(reference), n)
    # Counter intersection clips each n-gram at its reference count.
    overlap = sum((cand & ref).values())
    return _f1(overlap, sum(cand.values()), sum(ref.values()))


def rouge1(candidate: str, reference: str) -> float:
    """Unigram-overlap F1 with clipped counts, times 100.

    Two empty texts score 100; one empty text scores 0.
    """
    return _rouge_n(candidate, reference, 1)


def rouge2(candidate: str, reference: str) -> float:
    """Bigram-overlap F1 with clipped counts, times 100."""
    return _rouge_n(candidate, reference, 2)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Length of the longest common subsequence of two token sequences."""
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


def rougeL(candidate: str, reference: str) -> float:
    """Longest-common-subsequence F1 over word tokens, times 100."""
    cand, ref = word_tokens(candidate), word_tokens(reference)
    return _f1(lcs_length(cand, ref), len(cand), len(ref))


def levenshtein_similarity(candidate: str, reference: str) -> float:
    """100 * (1 - edit distance / length of the longer text), over characters."""
    longest = max(len(candidate), len(reference))
    if longest == 0:
        return 100.0
    return 100.0 * (1.0 - Levenshtein.distance(candidate, reference) / longest)


def accuracy(predictions: Sequence[str], references: Sequence[str]) -> float:
    """Percentage of predictions equal to their reference, ignoring case and outer spaces."""
    if len(predictions) != len(references):
        raise ValueError(
            f"{len(predictions)} predictions but {len(references)} references"
        )
    if not predictions:
        raise ValueError("accuracy of an empty corpus is undefined")
    hits = sum(
        p.strip().casefold() == r.strip().casefold() for p, r in zip(predictions, references)
    )
    return 100.0 * hits / len(predictions)


@dataclass
class ScoreReport:
    """Per-example scores and corpus means.

    Attributes:
        scores: Metric name -> one score per example.
        accuracy: Exact-match accuracy, when computed.
    """

    scores: dict[str, list[float]] = field(default_factory=dict)
    accuracy: float | None = None

    @property
    def means(self) -> dict[str, float]:
        return {name: float(np.mean(values)) for name, values in self.scores.items() if values}

    def summary(self) -> dict[str, float]:
        """Corpus means, plus accuracy when present."""
        result = self.means
        if self.accuracy is not None:
            result["accuracy"] = self.accuracy
        return result


_SCORERS = {
    "rouge1": rouge1,
    "rouge2": rouge2,
    "rougeL": rougeL,
    "levenshtein": levenshtein_similarity,
}


def score_corpus(
    candidates: Sequence[str],
    references: Sequence[str],
    metrics: Sequence[str] = GENERATION_METRICS,
    with_accuracy: bool = False,
) -> ScoreReport:
    """Score every candidate against its reference.

    Args:
        candidates: Released answers.
        references: Reference answers, aligned with ``candidates``.
        metrics: Names among rouge1, rouge2, rougeL and levenshtein.
        with_accuracy: Also compute exact-match accuracy.

    Raises:
        ValueError: On misaligned inputs or an unknown metric name.
    """
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} references")
    unknown = set(metrics) - set(_SCORERS)
    if unknown:
        raise ValueError(f"Unknown metrics {sorted(unknown)}; choose from {sorted(_SCORERS)}")

    report = ScoreReport(
        {name: [_SCORERS[name](c, r) for c, r in zip(candidates, references)] for name in metrics}
    )
    if with_accuracy and candidates:
        report.accuracy = accuracy(candidates, references)
    return report
