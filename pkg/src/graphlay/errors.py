"""Exception hierarchy shared across the toolkit.

Everything raised on bad input or bad state derives from GraphlayError so
the CLI can map domain failures to a single exit code.
"""


class GraphlayError(Exception):
    """Base class for all domain errors."""


class CorpusError(GraphlayError):
    """Malformed corpus file or article invariant violation."""


class LexiconError(GraphlayError):
    """Malformed lexicon file or registry violation."""


class ExtractionError(GraphlayError):
    """Concept extraction contract violation."""


class GraphError(GraphlayError):
    """Article-graph construction or serialization failure."""


class ModelConfigError(GraphlayError):
    """Invalid model configuration."""


class CheckpointError(GraphlayError):
    """Unreadable or incompatible checkpoint file."""


class TrainingDivergedError(GraphlayError):
    """Loss became non-finite during training."""


class AnnotationError(GraphlayError):
    """Judgment-session failure."""


class UnknownTaskError(AnnotationError):
    """Judgment submitted for a task id that does not exist."""


class DuplicateJudgmentError(AnnotationError):
    """A judge submitted a second judgment for the same task."""
