"""Exception hierarchy. Each family maps to a distinct CLI exit code."""


class IsoEMError(Exception):
    exit_code = 1


class ConfigError(IsoEMError, ValueError):
    exit_code = 2


class VolumeIOError(IsoEMError, OSError):
    exit_code = 3


class NumericalError(IsoEMError, ArithmeticError):
    exit_code = 4


class GeometryError(IsoEMError, ValueError):
    exit_code = 5


class SamplingError(IsoEMError, RuntimeError):
    exit_code = 6
