"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`SmolkError`,
so the CLI can turn it into a machine-readable error line.  Most classes also
inherit from the closest builtin so callers can keep catching ``ValueError``
or ``OSError``.
"""


class SmolkError(Exception):
    """Base class for all domain errors."""


# signal_io
class MissingFile(SmolkError, FileNotFoundError):
    pass


class LengthMismatch(SmolkError, ValueError):
    pass


class NonFiniteSample(SmolkError, ValueError):
    pass


class InvalidSpan(SmolkError, ValueError):
    pass


class EmptySignal(SmolkError, ValueError):
    pass


class IoError(SmolkError, OSError):
    pass


class ManifestError(SmolkError, ValueError):
    pass


# preprocess
class CutoffOutOfRange(SmolkError, ValueError):
    pass


class ChunkTooShort(SmolkError, ValueError):
    pass


class DegenerateChunk(SmolkError, ValueError):
    pass


# model
class SignalTooShort(SmolkError, ValueError):
    pass


class BandOutOfRange(SmolkError, ValueError):
    pass


class OverflowOnCast(SmolkError, OverflowError):
    pass


class BadMagic(SmolkError, ValueError):
    pass


class VersionUnsupported(SmolkError, ValueError):
    pass


class ChecksumMismatch(SmolkError, ValueError):
    pass


# train
class BadClass(SmolkError, ValueError):
    pass


class EmptyDataset(SmolkError, ValueError):
    pass


class NonFiniteLoss(SmolkError, FloatingPointError):
    pass


# compress
class AlreadyAbsorbed(SmolkError, ValueError):
    pass


class AbsorbedModel(SmolkError, ValueError):
    pass


class TooManyPairs(SmolkError, ValueError):
    pass


# interpret
class UnknownGroup(SmolkError, KeyError):
    pass


class InsufficientSamples(SmolkError, ValueError):
    pass


# postprocess
class WindowTooLarge(SmolkError, ValueError):
    pass


class BadWindow(SmolkError, ValueError):
    pass


# eval
class SingleClass(SmolkError, ValueError):
    pass


class TooFewSamples(SmolkError, ValueError):
    pass


# cli
class ConfigError(SmolkError, ValueError):
    pass
