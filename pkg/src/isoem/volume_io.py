"""
Volume I/O.

Volumes are indexed (z, y, x) with z the slice index of the stack, so a
lateral plane is ``voxels[k]`` and the axial planes are ``voxels[:, j, :]``
(xz) and ``voxels[:, :, i]`` (yz). Spacing is carried in nanometres and is
never defaulted silently.

Supported on-disk formats:

* ``tiff``  multi-page TIFF. Spacing is read from a JSON image description
  written by :func:`save_volume`, from ImageJ metadata, or from a JSON
  sidecar ``<stem>.json`` holding ``{"spacing_nm": [sz, sy, sx]}``.
* ``hdf5``  one dataset (default ``/volume``) with a ``spacing_nm`` attribute.
* ``raw``   little-endian C-order binary plus a ``<stem>.json`` sidecar
  holding ``{shape, dtype, spacing_nm}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from isoem.errors import ConfigError, VolumeIOError

PathLike = Union[str, Path]

FORMATS = ("tiff", "hdf5", "raw")
_SUFFIXES = {
    ".tif": "tiff",
    ".tiff": "tiff",
    ".h5": "hdf5",
    ".hdf5": "hdf5",
    ".raw": "raw",
    ".bin": "raw",
}
_DISK_DTYPES = ("uint8", "float32")
DEFAULT_H5_DATASET = "/volume"


@dataclass(frozen=True)
class Volume:
    """A 3D scalar grid with its physical voxel spacing.

    ``voxels`` is made read-only on construction so a Volume can be shared
    between threads without copies.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    provenance: str = ""

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3:
            raise ValueError(f"voxels must be 3D (z, y, x), got shape {vox.shape}")
        if min(vox.shape) < 1:
            raise ValueError(f"every axis needs at least one voxel, got {vox.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        vox = vox.view()
        vox.setflags(write=False)
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)

    @property
    def rho(self) -> float:
        """Axial-to-lateral spacing ratio sz / sx."""
        return self.spacing[0] / self.spacing[2]

    @property
    def is_isotropic(self) -> bool:
        return self.spacing[0] == self.spacing[1] == self.spacing[2]

    def replace(self, voxels=None, spacing=None, provenance=None) -> "Volume":
        return Volume(
            voxels=self.voxels if voxels is None else voxels,
            spacing=self.spacing if spacing is None else spacing,
            provenance=self.provenance if provenance is None else provenance,
        )

    def with_step(self, step: str, **kwargs) -> "Volume":
        """Copy with ``step`` appended to the provenance chain."""
        chain = f"{self.provenance} | {step}" if self.provenance else step
        return self.replace(provenance=chain, **kwargs)


def infer_format(path: PathLike) -> str:
    suffix = Path(path).suffix.lower()
    try:
        return _SUFFIXES[suffix]
    except KeyError:
        raise VolumeIOError(f"cannot infer volume format from suffix {suffix!r} of {path}") from None


def _check_format(fmt: Optional[str], path: PathLike) -> str:
    fmt = infer_format(path) if fmt is None else fmt.lower().replace("-stack", "")
    if fmt in ("tif", "tiff"):
        return "tiff"
    if fmt in ("h5", "hdf5"):
        return "hdf5"
    if fmt in ("raw", "raw+json", "raw+json-sidecar"):
        return "raw"
    raise VolumeIOError(f"unsupported volume format {fmt!r}; expected one of {FORMATS}")


def sidecar_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


def _spacing_tuple(value, source) -> tuple[float, float, float]:
    try:
        spacing = tuple(float(s) for s in value)
    except TypeError:
        raise VolumeIOError(f"spacing in {source} is not a sequence: {value!r}") from None
    if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
        raise VolumeIOError(f"spacing in {source} must be three positive numbers, got {value!r}")
    return spacing


def load_volume(
    path: PathLike,
    format: Optional[str] = None,
    spacing: Optional[Sequence[float]] = None,
    dataset: str = DEFAULT_H5_DATASET,
) -> Volume:
    """Load a volume without changing its stored values.

    ``spacing`` overrides any metadata found in the file. When neither
    metadata nor an override provide spacing, :class:`VolumeIOError` is
    raised.
    """
    path = Path(path)
    fmt = _check_format(format, path)
    if not path.exists():
        raise VolumeIOError(f"volume file not found: {path}")
    if fmt == "tiff":
        voxels, meta_spacing, provenance = _read_tiff(path)
    elif fmt == "hdf5":
        voxels, meta_spacing, provenance = _read_hdf5(path, dataset)
    else:
        voxels, meta_spacing, provenance = _read_raw(path)

    if spacing is not None:
        final = _spacing_tuple(spacing, "override")
    elif meta_spacing is not None:
        final = meta_spacing
    else:
        raise VolumeIOError(
            f"no voxel spacing found for {path}; supply it in metadata or pass an override"
        )
    return Volume(voxels, final, provenance or f"load:{path.name}")


def _read_sidecar(path: Path) -> Optional[dict]:
    side = sidecar_path(path)
    if not side.exists():
        return None
    try:
        return json.loads(side.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise VolumeIOError(f"unreadable sidecar {side}: {exc}") from exc


def _read_tiff(path: Path):
    import tifffile

    try:
        with tifffile.TiffFile(path) as tif:
            pages = list(tif.pages)
            if not pages:
                raise VolumeIOError(f"{path} contains no image pages")
            shapes = {tuple(p.shape) for p in pages}
            if len(shapes) != 1:
                raise VolumeIOError(f"{path} has slices of differing sizes: {sorted(shapes)}")
            (page_shape,) = shapes
            if len(page_shape) != 2:
                raise VolumeIOError(f"{path} pages must be single-channel 2D, got {page_shape}")
            voxels = np.stack([p.asarray() for p in pages])
            description = pages[0].description or ""
            imagej = tif.imagej_metadata
            x_res = pages[0].tags.get("XResolution")
            x_res = x_res.value if x_res is not None else None
    except VolumeIOError:
        raise
    except Exception as exc:  # tifffile raises a zoo of types on corrupt input
        raise VolumeIOError(f"corrupt or unreadable TIFF {path}: {exc}") from exc

    spacing, provenance = None, ""
    try:
        meta = json.loads(description)
    except (json.JSONDecodeError, TypeError):
        meta = None
    if isinstance(meta, dict) and "spacing_nm" in meta:
        spacing = _spacing_tuple(meta["spacing_nm"], f"{path} description")
        provenance = meta.get("provenance", "")
    elif imagej and "spacing" in imagej and x_res:
        spacing = _imagej_spacing(imagej, x_res, path)
    if spacing is None:
        side = _read_sidecar(path)
        if side is not None and "spacing_nm" in side:
            spacing = _spacing_tuple(side["spacing_nm"], sidecar_path(path))
    return voxels, spacing, provenance


_UNIT_TO_NM = {"nm": 1.0, "nanometer": 1.0, "um": 1e3, "micron": 1e3, "\\u00B5m": 1e3, "µm": 1e3}


def _imagej_spacing(imagej: dict, x_res, path: Path):
    unit = str(imagej.get("unit", "")).lower()
    if unit not in _UNIT_TO_NM:
        return None
    num, den = x_res
    lateral = den / num * _UNIT_TO_NM[unit]
    axial = float(imagej["spacing"]) * _UNIT_TO_NM[unit]
    return _spacing_tuple((axial, lateral, lateral), f"{path} ImageJ metadata")


def _read_hdf5(path: Path, dataset: str):
    import h5py

    try:
        with h5py.File(path, "r") as f:
            if dataset not in f:
                raise VolumeIOError(f"{path} has no dataset {dataset!r}")
            ds = f[dataset]
            if ds.ndim != 3:
                raise VolumeIOError(f"{path}:{dataset} is {ds.ndim}D, expected 3D")
            voxels = ds[()]
            spacing = ds.attrs.get("spacing_nm")
            provenance = ds.attrs.get("provenance", "")
    except VolumeIOError:
        raise
    except Exception as exc:
        raise VolumeIOError(f"corrupt or unreadable HDF5 {path}: {exc}") from exc
    if spacing is not None:
        spacing = _spacing_tuple(spacing, f"{path}:{dataset}")
    if isinstance(provenance, bytes):
        provenance = provenance.decode()
    return voxels, spacing, str(provenance)


def _read_raw(path: Path):
    meta = _read_sidecar(path)
    if meta is None:
        raise VolumeIOError(f"raw volume {path} needs a JSON sidecar at {sidecar_path(path)}")
    try:
        shape = tuple(int(s) for s in meta["shape"])
        dtype = np.dtype(meta["dtype"]).newbyteorder("<")
    except (KeyError, TypeError) as exc:
        raise VolumeIOError(f"sidecar {sidecar_path(path)} lacks shape/dtype: {exc}") from exc
    if len(shape) != 3:
        raise VolumeIOError(f"raw volume shape must be 3D, got {shape}")
    expected = int(np.prod(shape)) * dtype.itemsize
    actual = path.stat().st_size
    if actual != expected:
        raise VolumeIOError(f"{path} holds {actual} bytes, sidecar shape {shape} needs {expected}")
    voxels = np.fromfile(path, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    spacing = meta.get("spacing_nm")
    if spacing is not None:
        spacing = _spacing_tuple(spacing, sidecar_path(path))
    return voxels, spacing, meta.get("provenance", "")


def _disk_array(voxels: np.ndarray, dtype: Optional[str]) -> np.ndarray:
    if dtype is None:
        dtype = "uint8" if voxels.dtype == np.uint8 else "float32"
    if dtype not in _DISK_DTYPES:
        raise VolumeIOError(f"unsupported on-disk dtype {dtype!r}; expected one of {_DISK_DTYPES}")
    if dtype == "uint8":
        if voxels.dtype == np.uint8:
            return voxels
        # floating data is taken to live in [0, 1]
        return np.round(np.clip(voxels, 0.0, 1.0) * 255.0).astype(np.uint8)
    return voxels.astype(np.float32)


def save_volume(
    v: Volume,
    path: PathLike,
    format: Optional[str] = None,
    dtype: Optional[str] = None,
    dataset: str = DEFAULT_H5_DATASET,
) -> Path:
    """Write ``v`` so that :func:`load_volume` reproduces it.

    ``dtype`` is ``"uint8"`` or ``"float32"``; by default uint8 volumes stay
    8-bit and everything else is stored as float32.
    """
    path = Path(path)
    fmt = _check_format(format, path)
    data = np.ascontiguousarray(_disk_array(v.voxels, dtype))
    try:
        if fmt == "tiff":
            import tifffile

            description = json.dumps({"spacing_nm": list(v.spacing), "provenance": v.provenance})
            tifffile.imwrite(path, data, description=description, metadata=None, photometric="minisblack")
        elif fmt == "hdf5":
            import h5py

            with h5py.File(path, "w", track_order=True) as f:
                ds = f.create_dataset(dataset, data=data, track_times=False)
                ds.attrs["spacing_nm"] = np.asarray(v.spacing, dtype=np.float64)
                ds.attrs["provenance"] = v.provenance
        else:
            data.astype(data.dtype.newbyteorder("<")).tofile(path)
            meta = {
                "shape": list(data.shape),
                "dtype": data.dtype.name,
                "spacing_nm": list(v.spacing),
                "provenance": v.provenance,
            }
            sidecar_path(path).write_text(json.dumps(meta, indent=2))
    except OSError as exc:
        raise VolumeIOError(f"cannot write volume to {path}: {exc}") from exc
    return path


def normalize_intensity(v: Volume, lo_pct: float = 0.0, hi_pct: float = 100.0) -> Volume:
    """Map the ``lo_pct`` and ``hi_pct`` percentiles linearly to 0 and 1, clipping.

    Constant volumes map to all zeros.
    """
    if not (0.0 <= lo_pct < hi_pct <= 100.0):
        raise ConfigError(f"need 0 <= lo_pct < hi_pct <= 100, got ({lo_pct}, {hi_pct})")
    data = np.asarray(v.voxels, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise ValueError("volume contains non-finite voxels")
    lo, hi = np.percentile(data, [lo_pct, hi_pct])
    if hi <= lo:
        out = np.zeros(data.shape, dtype=np.float32)
    else:
        out = np.clip((data - lo) / (hi - lo), 0.0, 1.0).astype(np.float32)
    return v.with_step(f"normalize({lo_pct},{hi_pct})", voxels=out)
