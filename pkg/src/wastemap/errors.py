"""Exception hierarchy shared across the pipeline."""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(PipelineError):
    """A file could not be parsed; the message names the offending line/row."""


class ValidationError(PipelineError):
    """An input value violates a documented invariant."""


class ConfigError(PipelineError):
    """Bad or unknown configuration key/value."""
