class ConfigError(ValueError):
    """Invalid user configuration (topology, synth config, train config, grid spec)."""


class DataError(ValueError):
    """Input data cannot be used as requested (empty file, single-class split, ...)."""


class TrainingDiverged(RuntimeError):
    """A loss became non-finite during training."""
