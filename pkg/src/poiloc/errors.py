"""Exception hierarchy shared by every poiloc module.

Each error belongs to one of three families that the CLI maps onto exit
codes: configuration problems (2), data problems (3) and numerical
failures (4).
"""


class PoiLocError(Exception):
    exit_code = 1


class ConfigError(PoiLocError):
    exit_code = 2


class DataError(PoiLocError):
    exit_code = 3


class NumericalError(PoiLocError):
    exit_code = 4


class InvalidConfig(ConfigError, ValueError):
    pass


class BehindCamera(NumericalError):
    pass


class CoverageUnreachable(DataError):
    pass


class NotEnoughVisiblePoints(DataError):
    pass


class NoVisibleCandidates(DataError):
    pass


class DimensionMismatch(DataError, ValueError):
    pass


class NonFiniteInput(NumericalError, ValueError):
    pass


class IterOutOfRange(ConfigError, ValueError):
    pass


class DuplicateKey(DataError, KeyError):
    pass


class KeyMismatch(DataError, KeyError):
    pass


class Degenerate(NumericalError):
    pass


class NoConvergence(NumericalError):
    pass


class TooFewCorrespondences(DataError):
    pass


class NoModelFound(NumericalError):
    pass


class EmptyList(DataError, ValueError):
    pass


class EmptyQuerySet(DataError):
    pass


class EmptyBuffer(DataError):
    pass


class SchemaMismatch(DataError):
    pass
