"""Exception hierarchy shared by every subsystem."""

from __future__ import annotations


class DreamStoryError(Exception):
    """Base class for all library errors."""


# --- LLM / director -------------------------------------------------------


class LLMError(DreamStoryError):
    def __init__(self, message: str, stage: str | None = None, text: str | None = None):
        self.stage = stage
        self.text = text
        super().__init__(message)

    def __str__(self) -> str:
        msg = super().__str__()
        if self.stage:
            msg = f"[stage {self.stage}] {msg}"
        return msg


class LLMFormatError(LLMError):
    """The LLM answer could not be parsed or validated, even after retries."""


class SceneCountMismatch(LLMFormatError):
    pass


class RewriteLeak(LLMFormatError):
    """A subject name survived scene rewriting."""


class LLMTransportError(LLMError):
    pass


class ReplayMiss(LLMError):
    """A replay client was asked something that is not in its transcript."""


class PoolExhausted(LLMError):
    pass


# --- plans, schemas, inputs -----------------------------------------------


class PlanIntegrityError(DreamStoryError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class SchemaError(DreamStoryError):
    def __init__(self, message: str, location: str = "$"):
        self.location = location
        super().__init__(f"{location}: {message}")


class ConfigError(DreamStoryError, ValueError):
    pass


class InputError(DreamStoryError, ValueError):
    pass


class KeyMismatch(DreamStoryError, KeyError):
    pass


# --- numerics / backends --------------------------------------------------


class ShapeMismatch(DreamStoryError, ValueError):
    pass


class TimestepMisalignment(DreamStoryError):
    pass


class InvalidSpec(DreamStoryError, ValueError):
    pass


class SegmenterFailure(DreamStoryError):
    pass
