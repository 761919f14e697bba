"""Error types shared by every stage of the pipeline."""


class HOIGenError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(HOIGenError, ValueError):
    pass


class PreconditionViolation(HOIGenError, ValueError):
    pass


# prompts
class UnparsablePrompt(HOIGenError, ValueError):
    pass


class TokenizationMismatch(HOIGenError, ValueError):
    pass


# attention
class ShapeMismatch(HOIGenError, ValueError):
    pass


class ResolutionMismatch(HOIGenError, ValueError):
    pass


class ValueOutOfRange(HOIGenError, ValueError):
    pass


# backbone
class BackboneFailure(HOIGenError, RuntimeError):
    pass


class HookShapeMismatch(HOIGenError, ValueError):
    pass


class ScheduleExhausted(HOIGenError, ValueError):
    pass


class CandidateCountZero(HOIGenError, ValueError):
    pass


# agents
class DegenerateMap(HOIGenError, ValueError):
    pass


class NoHumanDetected(HOIGenError):
    pass


class InsufficientKeypoints(HOIGenError, ValueError):
    pass


class UnparsableAgentReply(HOIGenError, ValueError):
    def __init__(self, message: str, reply: str = ""):
        super().__init__(message)
        self.reply = reply


class BoxOutOfRange(UnparsableAgentReply):
    """A box that breaks 0 <= min < max <= 1, scraped or computed."""


class VLMUnavailable(HOIGenError, RuntimeError):
    pass


# correction
class BoxTooSmall(HOIGenError, ValueError):
    pass


class NonFiniteGradient(HOIGenError, ArithmeticError):
    pass


class DivergenceDetected(HOIGenError, RuntimeError):
    pass


# evaluation
class EmbedderUnavailable(HOIGenError, RuntimeError):
    pass


class EmptyBatch(HOIGenError, ValueError):
    pass


# runner
class PromptFileMissing(HOIGenError, FileNotFoundError):
    pass


class RunNotFound(HOIGenError, FileNotFoundError):
    pass


class ManifestError(HOIGenError, ValueError):
    """A run manifest that is not valid JSON or breaks the manifest schema."""


class StageError(HOIGenError):
    """A module error tagged with the pipeline stage it came from."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
