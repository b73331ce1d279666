class ConfigurationError(ValueError):
    """Invalid configuration, incompatible architecture, or missing teacher."""


class CheckpointError(RuntimeError):
    """A checkpoint could not be read or does not match the expected layout."""


class IngestionError(OSError):
    """Frames on disk are missing, unreadable, or inconsistent."""


class NumericalError(FloatingPointError):
    """A loss component became non-finite during training."""

    def __init__(self, component, value):
        self.component = component
        self.value = value
        super().__init__(f"non-finite loss component {component!r}: {value}")
