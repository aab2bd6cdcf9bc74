"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`GmmilError`,
split into data problems and fit problems so the CLI can map them to exit codes.
"""


class GmmilError(Exception):
    """Base class for all package errors."""


class ConfigError(GmmilError):
    """Invalid simulation, study, or EM configuration."""


class InvalidConfig(ConfigError):
    pass


class ConfigTooLarge(ConfigError):
    pass


class DataError(GmmilError):
    """Input data violate an operation's preconditions."""


class DimensionMismatch(DataError):
    pass


class EmptyDataset(DataError):
    pass


class NotSymmetric(DataError):
    pass


class UnlabeledInstance(DataError):
    pass


class InconsistentSubsample(DataError):
    pass


class MissingTruthLabel(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(DataError):
    def __init__(self, message, missing=()):
        self.missing = tuple(missing)
        super().__init__(message)


class FitError(GmmilError):
    """An estimator could not produce parameters."""


class NotFactorizable(FitError):
    pass


class NoPositiveBags(FitError):
    pass


class NoPositiveInstances(FitError):
    pass


class DegenerateResponsibilities(FitError):
    pass


class InitFailure(FitError):
    pass


class PilotTooSmall(FitError):
    pass


class TargetUnreachable(FitError):
    pass


class KernelNotFactorizable(FitError):
    pass
