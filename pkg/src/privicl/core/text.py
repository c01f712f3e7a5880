"""Word tokenization shared by keyword aggregation and the metrics."""

import re
from collections.abc import Iterable
from dataclasses import dataclass, field

_WORD = re.compile(r"[a-z0-9]+")

DEFAULT_STOPWORDS: frozenset[str] = frozenset(
    {
        "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "has", "he",
        "in", "is", "it", "its", "of", "on", "or", "she", "that", "the", "they",
        "this", "to", "was", "were", "will", "with",
    }
)


def word_tokens(text: str) -> list[str]:
    """Lowercase ``text`` and split it on every non-alphanumeric character."""
    return _WORD.findall(text.lower())


@dataclass(frozen=True)
class KeywordTokenizer:
    """Tokenizer for keyword-space aggregation.

    Attributes:
        min_length: Tokens shorter than this are dropped.
        stopwords: Tokens that are never counted.
    """

    min_length: int = 2
    stopwords: frozenset[str] = field(default=DEFAULT_STOPWORDS)

    def __call__(self, text: str) -> list[str]:
        return [
            token
            for token in word_tokens(text)
            if len(token) >= self.min_length and token not in self.stopwords
        ]

    @classmethod
    def from_words(cls, min_length: int, stopwords: Iterable[str] | None) -> "KeywordTokenizer":
        if stopwords is None:
            return cls(min_length)
        return cls(min_length, frozenset(word.lower() for word in stopwords))
