"""Quality assessment of AI-generated images with task-specific prompts and
sentence/word level image-text similarity."""

from promptiqa.errors import (
    BackendError,
    ConfigError,
    InputError,
    IQAError,
    NumericError,
    UndefinedCorrelationError,
)
from promptiqa.prompting import PromptScheme, PromptSet, TaskKind, build_prompts

__version__ = "0.1.0"

__all__ = [
    "BackendError",
    "ConfigError",
    "InputError",
    "IQAError",
    "NumericError",
    "UndefinedCorrelationError",
    "PromptScheme",
    "PromptSet",
    "TaskKind",
    "build_prompts",
]
