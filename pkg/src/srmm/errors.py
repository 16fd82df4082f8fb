"""Exception hierarchy.

Each error carries an ``exit_code`` so the command line can map failures
onto its exit-code contract without a lookup table.
"""


class SRMMError(Exception):
    exit_code = 3


class ConfigError(SRMMError, ValueError):
    exit_code = 64


class ShapeError(SRMMError, ValueError):
    pass


class DegenerateBatchError(SRMMError, ValueError):
    pass


class LabelError(SRMMError, ValueError):
    pass


class DataError(SRMMError, ValueError):
    pass


class FormatError(DataError):
    pass


class CorruptionError(DataError):
    pass


class IntegrityError(DataError):
    pass


class AvailabilityError(DataError):
    pass


class StratificationError(DataError):
    pass


class MetricUndefinedError(SRMMError, ValueError):
    pass


class DomainError(SRMMError, ValueError):
    pass


class ContractError(SRMMError, ValueError):
    pass
