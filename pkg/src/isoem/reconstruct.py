"""
Isotropic reconstruction of an anisotropic volume with a trained plane model.

1. Cubic-resize the volume to isotropic spacing.
2. For each selected orientation, cut the axial planes (xz: fixed y,
   yz: fixed x; rows are z), run the model over each plane in overlapping
   tiles blended with raised-cosine weights, and restack.
3. Average the orientations voxel-wise when both are used.

Lateral planes never go through the network.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Optional

import numpy as np
import torch

from isoem.errors import ConfigError, GeometryError, NumericalError
from isoem.model import predict
from isoem.resample import isotropic_plan, resize_volume_to_isotropic
from isoem.volume_io import Volume

ORIENTATIONS = ("xz", "yz")
PLANES = ("xz", "yz", "both")
FUSIONS = ("mean",)


@dataclass
class ReconstructionOptions:
    planes: str = "both"
    fusion: str = "mean"
    tile: int = 256
    tile_overlap: int = 32
    clip_output: bool = True
    batch_size: int = 8

    def __post_init__(self):
        if self.planes not in PLANES:
            raise ConfigError(f"planes must be one of {PLANES}, got {self.planes!r}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.tile_overlap < 0 or self.tile <= 2 * self.tile_overlap:
            raise ConfigError(f"need tile > 2 * tile_overlap >= 0, got tile={self.tile}, overlap={self.tile_overlap}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @property
    def orientations(self) -> tuple[str, ...]:
        return ORIENTATIONS if self.planes == "both" else (self.planes,)

    def to_dict(self) -> dict:
        return asdict(self)


_PLANE_AXIS = {"xz": 1, "yz": 2}


def slice_axial_planes(voxels: np.ndarray, orientation: str) -> np.ndarray:
    """Stack of axial planes ``(n_planes, z, lateral)``.

    ``xz`` yields ``voxels[:, j, :]`` for increasing ``j``; ``yz`` yields
    ``voxels[:, :, i]`` for increasing ``i``.
    """
    if orientation not in _PLANE_AXIS:
        raise ValueError(f"orientation must be one of {ORIENTATIONS}, got {orientation!r}")
    return np.moveaxis(np.asarray(voxels), _PLANE_AXIS[orientation], 0)


def restack_planes(planes: np.ndarray, orientation: str) -> np.ndarray:
    """Inverse of :func:`slice_axial_planes`."""
    if orientation not in _PLANE_AXIS:
        raise ValueError(f"orientation must be one of {ORIENTATIONS}, got {orientation!r}")
    return np.ascontiguousarray(np.moveaxis(np.asarray(planes), 0, _PLANE_AXIS[orientation]))


def tile_positions(length: int, tile: int, overlap: int) -> list[int]:
    """Tile origins along one axis.

    Stride is ``tile - overlap``; the last tile is shifted back to end at
    ``length``. Axes shorter than ``tile`` get one tile at 0 (the tile is
    then clipped to the axis length).
    """
    if tile <= 2 * overlap or overlap < 0:
        raise ValueError(f"need tile > 2 * overlap >= 0, got tile={tile}, overlap={overlap}")
    if length <= tile:
        return [0]
    stride = tile - overlap
    pos = list(range(0, length - tile, stride))
    if pos[-1] + tile < length:
        pos.append(length - tile)
    return pos


@dataclass(frozen=True)
class TileGrid:
    shape: tuple[int, int]
    tile: int
    overlap: int
    rows: tuple[int, ...]
    cols: tuple[int, ...]

    @property
    def tile_shape(self) -> tuple[int, int]:
        return min(self.tile, self.shape[0]), min(self.tile, self.shape[1])


def tile_plane(img: np.ndarray, tile: int, overlap: int):
    """Cut ``img`` into a row-major list of equally sized tiles and their grid."""
    img = np.asarray(img)
    h, w = img.shape
    grid = TileGrid((h, w), tile, overlap, tuple(tile_positions(h, tile, overlap)), tuple(tile_positions(w, tile, overlap)))
    th, tw = grid.tile_shape
    tiles = [img[r : r + th, c : c + tw] for r in grid.rows for c in grid.cols]
    return tiles, grid


def _ramp(n: int) -> np.ndarray:
    # raised cosine falling from ~1 to ~0 across n samples, symmetric so w + w[::-1] == 1
    t = (np.arange(n) + 0.5) / n
    return 0.5 * (1.0 + np.cos(np.pi * t))


def _blend_axis(pieces: list[np.ndarray], positions: Iterable[int], length: int, axis: int) -> np.ndarray:
    """Join pieces laid along ``axis`` at ``positions``.

    Overlaps are blended as ``b + w * (a - b)``, which is exact when both
    pieces carry the same values.
    """
    positions = list(positions)
    first = np.moveaxis(pieces[0], axis, 0)
    out = np.empty((length,) + first.shape[1:], dtype=np.float64)
    out[: first.shape[0]] = first
    end = first.shape[0]
    for pos, piece in zip(positions[1:], pieces[1:]):
        piece = np.moveaxis(piece, axis, 0)
        n_ov = end - pos
        if n_ov > 0:
            w = _ramp(n_ov).reshape((-1,) + (1,) * (piece.ndim - 1))
            prev, new = out[pos:end], piece[:n_ov]
            out[pos:end] = new + w * (prev - new)
        out[end : pos + piece.shape[0]] = piece[max(n_ov, 0) :]
        end = pos + piece.shape[0]
    return np.moveaxis(out, 0, axis)


def blend_tiles(tiles: list[np.ndarray], grid: TileGrid) -> np.ndarray:
    """Reassemble tiles from :func:`tile_plane`; exact when tiles are unmodified."""
    n_cols = len(grid.cols)
    strips = [
        _blend_axis(tiles[i * n_cols : (i + 1) * n_cols], grid.cols, grid.shape[1], axis=1)
        for i in range(len(grid.rows))
    ]
    return _blend_axis(strips, grid.rows, grid.shape[0], axis=0)


def reconstruction_geometry(shape, spacing):
    """Output (shape, spacing) of :func:`reconstruct`; depends on geometry only."""
    plan = isotropic_plan(shape, spacing)
    return plan.out_shape, (min(spacing),) * 3


PlaneModel = Callable[[torch.Tensor], torch.Tensor]


def super_resolve_planes(model: PlaneModel, planes: np.ndarray, opts: ReconstructionOptions) -> np.ndarray:
    """Run ``model`` over every plane of a ``(n, h, w)`` stack, tile by tile."""
    n, h, w = planes.shape
    _, grid = tile_plane(np.zeros((h, w)), opts.tile, opts.tile_overlap)
    th, tw = grid.tile_shape
    per_plane = len(grid.rows) * len(grid.cols)
    tiles = np.empty((n * per_plane, th, tw), dtype=np.float32)
    for i in range(n):
        t, _ = tile_plane(planes[i], opts.tile, opts.tile_overlap)
        tiles[i * per_plane : (i + 1) * per_plane] = t
    try:
        out = predict(model, tiles, batch_size=opts.batch_size)
    except ValueError as exc:
        raise GeometryError(f"model cannot process {th}x{tw} tiles of {h}x{w} planes: {exc}") from exc
    if not np.all(np.isfinite(out)):
        raise NumericalError("model produced non-finite values")
    result = np.empty((n, h, w), dtype=np.float64)
    for i in range(n):
        result[i] = blend_tiles(list(out[i * per_plane : (i + 1) * per_plane]), grid)
    return result


def reconstruct(v: Volume, model: PlaneModel, opts: Optional[ReconstructionOptions] = None) -> Volume:
    opts = opts or ReconstructionOptions()
    if not (v.spacing[0] >= v.spacing[1] and v.spacing[0] >= v.spacing[2]):
        raise GeometryError(f"axial spacing must be the coarsest, got spacing {v.spacing}")
    iso = resize_volume_to_isotropic(v, "cubic")
    data = np.asarray(iso.voxels, dtype=np.float64)
    fused = None
    for orientation in opts.orientations:
        planes = slice_axial_planes(data, orientation)
        vol = restack_planes(super_resolve_planes(model, planes, opts), orientation)
        fused = vol if fused is None else fused + vol
    fused = fused / len(opts.orientations)
    if opts.clip_output:
        fused = np.clip(fused, 0.0, 1.0)
    step = f"reconstruct(planes={opts.planes},tile={opts.tile},overlap={opts.tile_overlap})"
    return iso.with_step(step, voxels=fused.astype(np.float32))
