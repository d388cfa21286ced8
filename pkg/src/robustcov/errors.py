"""Exception hierarchy.

Errors fall into three classes that the command line maps onto exit codes:
configuration (2), data (3) and numerical (4).
"""


class RobustCovError(Exception):
    exit_code = 4


class ConfigError(RobustCovError, ValueError):
    exit_code = 2


class DataError(RobustCovError, ValueError):
    exit_code = 3


class NumericalError(RobustCovError, ArithmeticError):
    exit_code = 4


# data
class MalformedCsv(DataError):
    pass


class EmptyPanel(DataError):
    pass


class DuplicateDate(DataError):
    pass


class MissingCap(DataError):
    pass


class InsufficientHistory(DataError):
    pass


class InsufficientSamples(DataError):
    pass


class InsufficientRecords(DataError):
    pass


# parameter validation
class BadAlpha(ConfigError):
    pass


class BadDelta(ConfigError):
    pass


# numerical
class NotSpd(NumericalError):
    pass


class FitFailure(NumericalError):
    pass


class SingleCluster(NumericalError):
    pass


class EmptyClusterUnrecoverable(NumericalError):
    pass
