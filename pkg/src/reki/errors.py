"""Shared exception hierarchy.

Every domain failure raised by this package derives from RekiError so the
CLI can map them to a single non-zero exit code without matching strings.
"""


class RekiError(Exception):
    """Base class for all domain errors."""


class ShapeError(RekiError):
    """Operand shapes are incompatible; message names both shapes."""


class NumericError(RekiError):
    """A checked-mode numeric assertion failed (NaN/Inf in an op output)."""


class CorpusError(RekiError):
    """Raw table ingestion or sample construction failed."""


class MetricError(RekiError):
    """A metric's input precondition failed (e.g. single-class AUC)."""


class PromptError(RekiError):
    """Prompt rendering or factor elicitation failed."""


class ClientError(RekiError):
    """An LLM/encoder client call failed after retries."""


class ClusterError(RekiError):
    """Streaming clustering precondition or state violation."""


class StoreError(RekiError):
    """Vector store format, dimension, or integrity failure."""


class ConfigError(RekiError):
    """Run configuration is missing, malformed, or inconsistent."""


class PipelineError(RekiError):
    """A pipeline stage cannot run (missing artifact, empty input, ...)."""
