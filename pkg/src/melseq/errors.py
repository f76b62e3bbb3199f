"""Exception hierarchy shared across the package."""


class MelseqError(Exception):
    """Base class for all package errors."""


class DimensionError(MelseqError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class EvaluationError(MelseqError, ArithmeticError):
    """A function produced a non-finite value where a finite one was required."""


class InputError(MelseqError, ValueError):
    """Caller supplied data that violates an operation precondition."""


class FormatError(MelseqError, ValueError):
    """A file does not follow the expected on-disk format."""


class ChecksumError(FormatError):
    """A checkpoint or cache file failed its integrity check."""


class VersionError(FormatError):
    """A file was written by an incompatible format or model version."""


class CorpusError(MelseqError):
    """A corpus directory contains no usable utterances."""


class EmptyTextError(InputError):
    """Text normalization left nothing to synthesize."""


class VocabError(MelseqError, KeyError):
    """A character or id is not part of the vocabulary."""


class AttentionError(MelseqError, ValueError):
    """Attention was asked to attend over an empty set of keys."""
