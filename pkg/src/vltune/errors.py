"""Exception hierarchy shared by all subsystems."""


class VLTuneError(Exception):
    """Base class; ``category`` drives the CLI exit code."""

    category = "error"
    exit_code = 1


class ConfigError(VLTuneError, ValueError):
    category = "config"
    exit_code = 2


class InputError(VLTuneError, ValueError):
    category = "input"
    exit_code = 3


class LengthError(InputError):
    pass


class ManifestError(InputError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class AugmentationUnavailable(VLTuneError, RuntimeError):
    category = "augmentation"
    exit_code = 4


class NumericError(VLTuneError, FloatingPointError):
    category = "numeric"
    exit_code = 5

    def __init__(self, message, layer=None):
        self.layer = layer
        if layer is not None:
            message = f"{message} (layer {layer})"
        super().__init__(message)
