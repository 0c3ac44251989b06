"""
Separable resampling of planes and volumes, and axial under-sampling.

All interpolators use pixel-centre alignment: output sample ``j`` of an
axis resized from ``n_in`` to ``n_out`` reads the input at
``(j + 0.5) * n_in / n_out - 0.5``. Out-of-range taps are mirrored about
the edge samples (``d c b a | a b c d``). The cubic kernel is Catmull-Rom
(a = -0.5), which reproduces linear ramps exactly and whose weights sum to
one, so constants are fixed points.

The cubic path doubles as the comparison baseline in evaluation reports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.ndimage import gaussian_filter1d

from isoem.volume_io import Volume

METHODS = ("nearest", "linear", "cubic")
KERNELS = ("box-average", "decimate", "gaussian+decimate")
CUBIC_A = -0.5


@dataclass(frozen=True)
class ResamplePlan:
    in_shape: tuple[int, int, int]
    out_shape: tuple[int, int, int]
    method: str
    scale: tuple[float, float, float]

    def __post_init__(self):
        if min(self.out_shape) < 1:
            raise ValueError(f"output shape must be positive, got {self.out_shape}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")


def _catmull_rom(t: np.ndarray) -> np.ndarray:
    a = CUBIC_A
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def _mirror(idx: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - 1 - idx, idx)


@lru_cache(maxsize=256)
def _weights(n_in: int, n_out: int, method: str) -> np.ndarray:
    """Dense (n_out, n_in) interpolation matrix for one axis."""
    w = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    rows = np.arange(n_out)
    if method == "nearest":
        idx = np.clip(np.floor(src + 0.5).astype(int), 0, n_in - 1)
        w[rows, idx] = 1.0
    elif method == "linear":
        base = np.floor(src).astype(int)
        frac = src - base
        for off, wt in ((0, 1.0 - frac), (1, frac)):
            np.add.at(w, (rows, _mirror(base + off, n_in)), wt)
    elif method == "cubic":
        base = np.floor(src).astype(int)
        frac = src - base
        for off in (-1, 0, 1, 2):
            np.add.at(w, (rows, _mirror(base + off, n_in)), _catmull_rom(frac - off))
    else:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    w.setflags(write=False)
    return w


def resize_axis(data: np.ndarray, n_out: int, axis: int, method: str = "cubic") -> np.ndarray:
    """Resample one axis of ``data`` to ``n_out`` samples (no clipping)."""
    if n_out < 1:
        raise ValueError(f"target size must be >= 1, got {n_out}")
    n_in = data.shape[axis]
    if n_in == n_out:
        return np.array(data, dtype=np.float64)
    w = _weights(n_in, n_out, method)
    moved = np.moveaxis(np.asarray(data, dtype=np.float64), axis, 0)
    out = np.tensordot(w, moved, axes=(1, 0))
    return np.moveaxis(out, 0, axis)


def resize_plane(img: np.ndarray, out_h: int, out_w: int, method: str = "cubic") -> np.ndarray:
    """Separable resize of a 2D grid, clipped to [0, 1].

    Same-size requests return an unmodified copy.
    """
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected a 2D plane, got shape {img.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got ({out_h}, {out_w})")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if img.shape == (out_h, out_w):
        return img.copy()
    out = resize_axis(img, out_h, 0, method)
    out = resize_axis(out, out_w, 1, method)
    return np.clip(out, 0.0, 1.0).astype(img.dtype if img.dtype.kind == "f" else np.float64)


def isotropic_plan(shape, spacing, method: str = "cubic") -> ResamplePlan:
    """Target geometry for resampling to the finest spacing on every axis."""
    target = min(spacing)
    out = tuple(max(1, int(round(n * s / target))) for n, s in zip(shape, spacing))
    scale = tuple(s / target for s in spacing)
    return ResamplePlan(tuple(int(n) for n in shape), out, method, scale)


def resize_volume_to_isotropic(v: Volume, method: str = "cubic") -> Volume:
    """Resample every axis coarser than the finest spacing up to it.

    Axes already at the target spacing are passed through untouched.
    """
    plan = isotropic_plan(v.shape, v.spacing, method)
    target = min(v.spacing)
    if plan.out_shape == plan.in_shape:
        data = np.array(v.voxels, dtype=np.float32) if v.voxels.dtype.kind != "f" else v.voxels
        return v.with_step("isotropic(identity)", voxels=data, spacing=(target,) * 3)
    data = np.asarray(v.voxels)
    for axis, (n_in, n_out) in enumerate(zip(plan.in_shape, plan.out_shape)):
        if n_in != n_out:
            data = resize_axis(data, n_out, axis, method)
    data = np.clip(data, 0.0, 1.0).astype(np.float32)
    return v.with_step(f"isotropic({method})", voxels=data, spacing=(target,) * 3)


def downsampled_rows(m: int, rho: float) -> int:
    """Row count after reducing ``m`` rows by ``rho`` (floor policy)."""
    return max(1, int(math.floor(m / rho + 1e-9)))


def _area_weights(m: int, rho: float, n_out: int) -> np.ndarray:
    # output row i averages input rows over [i*rho, (i+1)*rho), partial coverage weighted
    w = np.zeros((n_out, m))
    for i in range(n_out):
        lo, hi = i * rho, min((i + 1) * rho, m)
        for r in range(int(math.floor(lo)), int(math.ceil(hi))):
            w[i, r] = min(hi, r + 1) - max(lo, r)
        w[i] /= w[i].sum()
    return w


def _is_integer(rho: float) -> bool:
    return abs(rho - round(rho)) < 1e-9


def downsample_axial(img: np.ndarray, rho: float, kernel: str = "box-average") -> np.ndarray:
    """Reduce the row count of ``img`` by ``rho``; columns are untouched.

    Rows play the role of the future axial direction. Integer ``rho`` honours
    ``kernel``; non-integer ``rho`` always uses area-weighted averaging over
    windows of ``rho`` rows. Output has ``floor(rows / rho)`` rows.
    """
    if rho < 1:
        raise ValueError(f"rho must be >= 1, got {rho}")
    if kernel not in KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}; expected one of {KERNELS}")
    img = np.asarray(img, dtype=np.float64)
    m = img.shape[0]
    n_out = downsampled_rows(m, rho)
    if not _is_integer(rho):
        return np.tensordot(_area_weights(m, rho, n_out), img, axes=(1, 0))
    r = int(round(rho))
    if r == 1:
        return img.copy()
    if kernel == "box-average":
        return img[: n_out * r].reshape((n_out, r) + img.shape[1:]).mean(axis=1)
    if kernel == "gaussian+decimate":
        img = gaussian_filter1d(img, sigma=r / 2.0, axis=0, mode="reflect")
    # sample at window centres so the grid matches box-average
    return img[r // 2 : n_out * r : r]
