"""Exception types raised across ifmlab.

CLI exit codes are attached to the base classes so ``ifmlab.cli`` can map any
failure to the stable contract: 2 input error, 3 numeric divergence, 4 I/O.
"""


class IFMError(Exception):
    exit_code = 2


class InputError(IFMError, ValueError):
    exit_code = 2


class NumericError(IFMError, ArithmeticError):
    exit_code = 3


class StorageError(IFMError, OSError):
    exit_code = 4


# data
class BadMagic(InputError):
    pass


class TruncatedPayload(InputError):
    pass


class DimensionMismatch(InputError):
    pass


class InsufficientTextures(InputError):
    pass


class UnreadableImage(InputError):
    pass


class TextureTooSmall(InputError):
    pass


class EmptySource(InputError):
    pass


class IoFailure(StorageError):
    pass


class BadHeader(StorageError):
    pass


class ChecksumMismatch(StorageError):
    pass


class VersionMismatch(StorageError):
    pass


# models / mi
class BadShape(InputError):
    pass


class BadLabel(InputError):
    pass


class NonIntegerScale(InputError):
    pass


class ShapeMismatch(InputError):
    pass


class ZeroSamples(InputError):
    pass


class WidthMismatch(InputError):
    pass


class EmptyBatch(InputError):
    pass


class DegenerateRho(InputError):
    pass


# training / eval
class DivergedLoss(NumericError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step
        self.value = value


class DataExhausted(InputError):
    pass


class EmptyHistory(InputError):
    pass


class EmptySplit(InputError):
    pass


class ConfigMismatch(InputError):
    pass
