"""Question/answer templates that stand in for the reasoning step on
datasets that only carry a short referring phrase."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, InvalidInputError
from ..validation import check_random_state
from .manifest import Category, SampleRecord

PLACEHOLDER = "[PHRASE]"


@dataclass(frozen=True)
class QaTemplate:
    template_id: str
    question: str
    answer: str

    def __post_init__(self):
        for form in (self.question, self.answer):
            if form.count(PLACEHOLDER) != 1:
                raise ConfigurationError(f"{self.template_id}: {form!r} must contain {PLACEHOLDER} exactly once")

    def instantiate(self, phrase: str) -> tuple[str, str]:
        return self.question.replace(PLACEHOLDER, phrase), self.answer.replace(PLACEHOLDER, phrase)


DEFAULT_QA_TEMPLATES = (
    QaTemplate("qa0", "What is [PHRASE]'s region in this image?", "It is [PHRASE]."),
    QaTemplate("qa1", "Can you segment [PHRASE] in this image?", "Sure, it is [PHRASE]."),
    QaTemplate("qa2", "Where is [PHRASE] in this picture?", "[PHRASE] is shown in the picture."),
    QaTemplate("qa3", "Please find [PHRASE] in this image.", "The region is [PHRASE]."),
    QaTemplate("qa4", "Which part of the image shows [PHRASE]?", "The part showing [PHRASE]."),
    QaTemplate("qa5", "What is the object or part that is [PHRASE] in this image?", "It is [PHRASE] in the image."),
    QaTemplate("qa6", "Could you point out [PHRASE] in this image?", "Yes, that is [PHRASE]."),
    QaTemplate("qa7", "Identify [PHRASE] in the given image.", "The target is [PHRASE]."),
)


def simulate_step1(record: SampleRecord, registry=DEFAULT_QA_TEMPLATES, rng=None) -> tuple[str, str]:
    """Draw a Q-A template uniformly and fill it with the record's phrase."""
    if record.category is Category.REASONING:
        raise InvalidInputError(f"{record.sample_id}: reasoning samples carry a genuine query")
    if not registry:
        raise ConfigurationError("empty Q-A template registry")
    rng = check_random_state(rng)
    template = registry[int(rng.integers(len(registry)))]
    return template.instantiate(record.text)
