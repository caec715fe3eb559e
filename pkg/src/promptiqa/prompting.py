"""Task-specific prompt construction.

Sentences are always ordered from the worst quality level to the best, so
index ``j`` (0-based here) maps to level ``j + 1`` of the coarse score.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from promptiqa.errors import ConfigError, InputError


class TaskKind(str, Enum):
    PERCEPTION = "perception"
    ALIGNMENT = "alignment"


class PromptScheme(str, Enum):
    ANTONYM = "antonym"
    ADJECTIVE = "adjective"
    ADVERB = "adverb"


ADVERBS = ("badly", "poorly", "fairly", "well", "perfectly")
ANTONYMS = ("bad", "good")
ADJECTIVES = ("bad", "poor", "fair", "good", "perfect")

_TEMPLATES = {
    PromptScheme.ADVERB: "A photo that {level} matches {prompt}.",
    PromptScheme.ANTONYM: "{level} photo.",
    PromptScheme.ADJECTIVE: "A photo of {level} quality.",
}
_LEVELS = {
    PromptScheme.ADVERB: ADVERBS,
    PromptScheme.ANTONYM: ANTONYMS,
    PromptScheme.ADJECTIVE: ADJECTIVES,
}
VALID_SCHEMES = {
    TaskKind.PERCEPTION: (PromptScheme.ANTONYM, PromptScheme.ADJECTIVE),
    TaskKind.ALIGNMENT: (PromptScheme.ADVERB,),
}
DEFAULT_SCHEME = {
    TaskKind.PERCEPTION: PromptScheme.ADJECTIVE,
    TaskKind.ALIGNMENT: PromptScheme.ADVERB,
}


@dataclass(frozen=True)
class PromptSet:
    task: TaskKind
    scheme: PromptScheme
    sentences: tuple[str, ...]
    initial_prompt: str

    @property
    def levels(self) -> int:
        return len(self.sentences)


def check_scheme(task: TaskKind, scheme: PromptScheme, strict: bool = True) -> None:
    if strict and scheme not in VALID_SCHEMES[task]:
        valid = ", ".join(s.value for s in VALID_SCHEMES[task])
        raise ConfigError(
            f"prompt scheme {scheme.value!r} is not valid for the {task.value} task "
            f"(valid: {valid})"
        )


def level_words(scheme: PromptScheme) -> tuple[str, ...]:
    return _LEVELS[PromptScheme(scheme)]


def build_prompts(
    task: TaskKind | str,
    scheme: PromptScheme | str,
    initial_prompt: str,
    levels: Sequence[str] | None = None,
    strict: bool = True,
) -> PromptSet:
    """Instantiate the quality-level sentences for one image.

    ``levels`` overrides the frozen level words (ascending quality); the
    number of levels follows its length. ``strict=False`` lets any scheme
    pair with any task, which the cross-task prompt ablation needs.
    """
    task = TaskKind(task)
    scheme = PromptScheme(scheme)
    check_scheme(task, scheme, strict)
    if not initial_prompt or not initial_prompt.strip():
        raise InputError("initial prompt is empty")
    words = tuple(levels) if levels is not None else _LEVELS[scheme]
    if len(words) < 2:
        raise ConfigError("at least two quality levels are required")
    template = _TEMPLATES[scheme]
    sentences = tuple(template.format(level=w, prompt=initial_prompt) for w in words)
    return PromptSet(task=task, scheme=scheme, sentences=sentences, initial_prompt=initial_prompt)
