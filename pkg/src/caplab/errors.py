"""Exception types shared across the package.

Each error maps to one failure mode of the public contracts; CLI exit
codes are derived from these classes (see cli module).
"""


class CapLabError(Exception):
    """Base class for all package errors."""


class ShapeError(CapLabError):
    """Tensor extents incompatible with the requested operation."""


class EmptyLossError(CapLabError):
    """A loss was requested over zero weighted positions."""


class ConfigError(CapLabError):
    """Invalid model or training configuration."""


class OOVError(CapLabError):
    """A caption word is not in the vocabulary."""


class LengthError(CapLabError):
    """A caption does not fit the fixed sequence length."""


class VocabError(CapLabError):
    """A token id has no entry in the vocabulary."""


class PerturbError(CapLabError):
    """The requested perturbation kind does not apply to this example."""


class FormatError(CapLabError):
    """A serialized artifact is malformed or truncated."""


class VersionError(CapLabError):
    """A serialized artifact has an unsupported format version."""


class BatchTooSmall(CapLabError):
    """Contrastive loss needs at least two examples."""


class InsufficientShots(CapLabError):
    """Not enough labeled examples per class for a k-shot probe."""
