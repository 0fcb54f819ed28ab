"""Exception hierarchy.

Each family carries the CLI exit code it maps to: 1 usage, 2 data, 3 numerical.
"""


class ASDError(Exception):
    exit_code = 1


class UsageError(ASDError):
    exit_code = 1


class DataError(ASDError):
    exit_code = 2


class NumericalError(ASDError):
    exit_code = 3


# corpus
class MalformedName(DataError):
    pass


class EmptyCorpus(DataError):
    pass


class CorpusIOError(DataError):
    pass


# frontend / embedder
class ClipTooShort(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class CheckpointError(DataError):
    pass


# objectives / trainer
class ZeroEmbedding(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    pass


class SingleClassError(DataError):
    pass


class KeyMismatch(DataError):
    pass


# pseudolabel
class PoolTooSmall(DataError):
    pass


class MissingClip(DataError):
    pass


class DimMismatch(DataError):
    pass


class TooFewPoints(DataError):
    pass


class DegenerateCovariance(NumericalError):
    pass


# backend / evalkit / viz
class EmptySource(DataError):
    pass


class EmptyClass(DataError):
    pass


class MissingPoints(DataError):
    pass


class ConfigHashMismatch(DataError):
    pass


class InvalidVector(DataError):
    pass
