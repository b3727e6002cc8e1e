from __future__ import annotations


class MpsrError(Exception):
    """Root of every error raised by mpsr_engine."""


class ValidationError(MpsrError, ValueError):
    """A value violates a type invariant (bad box, duplicate image id, ...)."""


class DatasetFormatError(MpsrError, ValueError):
    """annotations.json could not be parsed; the message names the record."""


class FewShotError(MpsrError):
    """Not enough instances to build the requested few-shot subset."""


class ShapeError(MpsrError, ValueError):
    """Tensor shape does not satisfy the detector's stride contract."""


class LossError(MpsrError, ValueError):
    """A loss normalization set is empty."""


class CheckpointError(MpsrError):
    """Checkpoint directory is missing, corrupt or from another format version."""


class ConfigError(MpsrError, ValueError):
    """Config file key or value could not be understood."""
