"""Exception hierarchy. Each error carries the CLI exit code it maps to."""


class CamoxError(Exception):
    """Base class for all camox errors."""

    exit_code: int = 4


class ConfigError(CamoxError, ValueError):
    """Invalid configuration, spec file or command-line precondition."""

    exit_code = 2


class DataFormatError(CamoxError, ValueError):
    """Input data could not be parsed or does not satisfy its format."""

    exit_code = 3


class NoValidWindowsError(DataFormatError):
    """A recording produced no usable 90-frame window."""


class ClippingError(DataFormatError):
    """A rendered channel is saturated on every sample."""


class SingleClassError(CamoxError, ValueError):
    """Only one class is present at a classification threshold, so ROC is undefined."""

    exit_code = 3


class SplitError(CamoxError):
    """A single LOOCV split failed."""

    exit_code = 3

    def __init__(self, split_id: int, message: str):
        super().__init__(f"split {split_id}: {message}")
        self.split_id = split_id


class LeakageError(CamoxError):
    """Test-subject data reached a training or validation set."""

    exit_code = 4
