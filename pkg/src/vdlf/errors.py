"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class VDLFError(Exception):
    exit_code = 1


class ConfigError(VDLFError):
    exit_code = 1


class DataError(VDLFError):
    exit_code = 2


class MalformedFileError(DataError):
    pass


class CorruptRecordError(DataError):
    pass


class EpisodeSamplingError(DataError):
    pass


class NumericFailure(VDLFError):
    exit_code = 3


class ProtocolError(VDLFError):
    exit_code = 3
