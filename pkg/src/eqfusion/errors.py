"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration file, key, or value."""


class DatasetError(ValueError):
    """Dataset layout, spec, or split request violates its contract."""


class SamplingError(ValueError):
    """A task sampling request cannot be satisfied."""


class PlanError(ValueError):
    """A fusion plan violates its contract or is missing required fields."""


class TrainingDiverged(RuntimeError):
    """Raised when a training step produces a non-finite loss.

    Carries a diagnostic dump (iteration, loss components, gradient norms)
    so the failure can be inspected after the run aborts.
    """

    def __init__(self, message, dump):
        super().__init__(message)
        self.dump = dump
