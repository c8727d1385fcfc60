""" error hierarchy shared by every app """

EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_ERROR = 3


class FlowRestoreError(Exception):
    exit_code = EXIT_RUNTIME_ERROR


class ConfigError(FlowRestoreError):
    exit_code = EXIT_CONFIG_ERROR


class ParameterError(FlowRestoreError, ValueError):
    pass


class ShapeError(FlowRestoreError, ValueError):
    pass


class ContractError(FlowRestoreError):
    """ a conditioning variant was used outside of what it supports """


class TrajectoryError(FlowRestoreError, ValueError):
    pass


class GateFailureError(FlowRestoreError):

    def __init__(self, message, closest_ssim=None, attempts=0):
        super().__init__(message)
        self.closest_ssim = closest_ssim
        self.attempts = attempts


class BuildError(FlowRestoreError):

    def __init__(self, message, offenders=()):
        super().__init__(message)
        self.offenders = list(offenders)


class NumericalError(FlowRestoreError):

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class TrainingDivergedError(NumericalError):
    pass


class CheckpointError(FlowRestoreError):
    """ an archive that cannot be read back as a checkpoint """
