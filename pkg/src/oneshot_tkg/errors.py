"""Exception hierarchy. ``exit_code`` is what the CLI returns for each class."""


class TKGError(Exception):
    exit_code = 1


class InputError(TKGError):
    exit_code = 2


class MalformedLine(InputError):
    pass


class UnknownSymbol(InputError):
    pass


class NonNumericTime(InputError):
    pass


class InfeasibleSplit(TKGError):
    exit_code = 3


class EmptySparseSet(InfeasibleSplit):
    pass


class InfeasiblePartition(InfeasibleSplit):
    pass


class SpanTooShort(InfeasibleSplit):
    pass


class ArchiveFormatError(TKGError):
    exit_code = 4


class NumericError(TKGError):
    exit_code = 5


class NonFiniteLoss(NumericError):
    def __init__(self, episode, value):
        super().__init__(f"non-finite loss {value!r} at episode {episode}")
        self.episode = episode
        self.value = value


class ShapeMismatch(TKGError, ValueError):
    pass


class NonScalarLoss(TKGError, ValueError):
    pass


class ConfigError(TKGError, ValueError):
    exit_code = 2


class HistoryLengthMismatch(TKGError, ValueError):
    pass


class NoFeasibleTask(TKGError):
    exit_code = 3


class EmptyRankList(TKGError, ValueError):
    pass


class NegativeGap(TKGError, ValueError):
    pass


class EmptyPartition(TKGError):
    exit_code = 3
