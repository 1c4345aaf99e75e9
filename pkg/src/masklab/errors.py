"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with inputs outside its precondition."""


class DomainError(ValueError):
    """A math kernel received an input outside its domain (e.g. log of 0)."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class GenerationError(RuntimeError):
    pass


class CorpusFormatError(ValueError):
    """A JSONL record could not be parsed or failed validation."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NoSalientSpan(ValueError):
    """Raised by salient span masking on a document without entities."""


class TargetNotInContext(ValueError):
    pass


class EmptySample(ValueError):
    """An analysis was asked to summarize a sample with no masked tokens."""
