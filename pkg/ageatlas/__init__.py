"""Age regression with Grad-CAM importance atlases on synthetic whole-body volumes."""

from .errors import (
    AgeAtlasError,
    ConfigError,
    MissingArtifactError,
    NumericalError,
    RegistrationError,
)
from .volume import Volume3, read_vol, write_vol

__version__ = "0.1.0"

__all__ = [
    "AgeAtlasError",
    "ConfigError",
    "MissingArtifactError",
    "NumericalError",
    "RegistrationError",
    "Volume3",
    "read_vol",
    "write_vol",
    "__version__",
]
