"""In-context urban profiling with a masked diffusion transformer."""

from .errors import CheckpointFormatError, ConfigError, DataError, NumericalError, UrbanICLError

__version__ = "0.1.0"

__all__ = [
    "CheckpointFormatError",
    "ConfigError",
    "DataError",
    "NumericalError",
    "UrbanICLError",
    "__version__",
]
