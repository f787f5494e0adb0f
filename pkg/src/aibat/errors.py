"""Error types shared across the pipeline stages."""


class AibatError(Exception):
    """Base class for pipeline errors."""


class NoInkFound(AibatError):
    """Blank page and no region override supplied."""


class UnsupportedGlyph(AibatError):
    """Corpus text contains a character outside the embedded font."""

    def __init__(self, char: str):
        super().__init__(f"glyph not in font: {char!r}")
        self.char = char


class EngineUnavailable(AibatError):
    """External OCR engine could not be invoked or exited non-zero."""


class EmptyOcrResult(AibatError):
    """OCR produced no text for a crop. Non-fatal; caller records a warning."""


class EndpointUnreachable(AibatError):
    """Inference endpoint could not be reached."""


class SchemaExhausted(AibatError):
    """All retry attempts produced schema-invalid model output."""

    def __init__(self, attempts: int, last_violations=None):
        super().__init__(f"no valid model output after {attempts} attempts")
        self.attempts = attempts
        self.last_violations = last_violations or []


class MalformedSubstep(AibatError):
    """Template substep whose data/options do not match its action."""


class StageError(AibatError):
    """A pipeline stage failed; message enumerates per-item failures."""


class StageNotReady(StageError):
    """Requested stage needs an artifact from an earlier stage."""


class StageOrderViolation(AibatError):
    """Attempted state transition that is not forward in stage order."""


class JobLocked(AibatError):
    """Another writer holds the per-job lock."""
