"""Self-supervised isotropic reconstruction of anisotropic 3D EM volumes."""

from isoem.errors import (
    ConfigError,
    GeometryError,
    IsoEMError,
    NumericalError,
    SamplingError,
    VolumeIOError,
)
from isoem.volume_io import Volume, load_volume, normalize_intensity, save_volume

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "GeometryError",
    "IsoEMError",
    "NumericalError",
    "SamplingError",
    "Volume",
    "VolumeIOError",
    "load_volume",
    "normalize_intensity",
    "save_volume",
]
