"""Prompt templates for classification and generation ensembles.

A template renders the few-shot prompt of one ensemble member (its subset of
exemplars followed by the query) and the zero-shot prompts that must never see
private exemplars: ESA candidates and keyword-guided reconstruction.
"""

from collections.abc import Sequence
from dataclasses import dataclass, replace

SUGGESTIONS = " with the following word suggestions:"
RANKED_SUGGESTIONS = (
    " with the following word suggestions ranked by their frequency from high to low:"
)


@dataclass(frozen=True)
class PromptTemplate:
    """Cue strings of one task.

    Attributes:
        input_cue: Line introducing each input, e.g. ``"Review:"``.
        answer_cue: Line introducing each answer, e.g. ``"Sentiment:"``.
        instruction: Optional task description placed before the exemplars.
        labels: Admissible labels for classification tasks, empty otherwise.
    """

    input_cue: str
    answer_cue: str
    instruction: str = ""
    labels: tuple[str, ...] = ()

    def _block(self, input_text: str, answer_text: str | None) -> str:
        # The unanswered block ends on the cue so the model writes the answer.
        if answer_text is None:
            return f"{self.input_cue} {input_text}\n{self.answer_cue}"
        return f"{self.input_cue} {input_text}\n{self.answer_cue} {answer_text}\n"

    def few_shot(self, demonstrations: Sequence[tuple[str, str]], query: str) -> str:
        """Render the demonstrations followed by the unanswered query."""
        parts = [f"{self.instruction}\n\n"] if self.instruction else []
        parts.extend(self._block(q, a) + "\n" for q, a in demonstrations)
        parts.append(self._block(query, None))
        return "".join(parts)

    def zero_shot(self, query: str) -> str:
        """Render the query alone, with no demonstrations."""
        return self.few_shot((), query)

    def with_keywords(self, query: str, keywords: Sequence[str], ranked: bool) -> str:
        """Render a zero-shot prompt that suggests the released keywords.

        Args:
            query: Query text.
            keywords: Released keywords, in the order they should appear.
            ranked: Whether the order reflects estimated frequency.
        """
        suffix = RANKED_SUGGESTIONS if ranked else SUGGESTIONS
        cue = self.answer_cue.rstrip().removesuffix(":") + suffix
        hinted = replace(self, answer_cue=f"{cue} {', '.join(keywords)}")
        return hinted.zero_shot(query)


TREC_INSTRUCTION = (
    "Classify the questions based on whether their answer type is a Number, Location, "
    "Person, Description, Entity, or Abbreviation."
)

CLASSIFICATION_PRESETS: dict[str, PromptTemplate] = {
    "sst2": PromptTemplate("Review:", "Sentiment:", labels=("Negative", "Positive")),
    "agnews": PromptTemplate(
        "Article:", "Answer:", labels=("World", "Sports", "Business", "Technology")
    ),
    "trec": PromptTemplate(
        "Question:",
        "Answer Type:",
        instruction=TREC_INSTRUCTION,
        labels=("Number", "Location", "Person", "Description", "Entity", "Abbreviation"),
    ),
}

GENERATION_PRESETS: dict[str, PromptTemplate] = {
    "samsum": PromptTemplate("Dialogue:", "Summarize the above dialogue:"),
    "docvqa": PromptTemplate(
        "Extracted OCR tokens from image:", "Answer the question with short term:"
    ),
}
