"""
Self-supervised training pair synthesis and phantom volumes.

Ground-truth patches are cut from lateral (constant-z) planes, which are
natively sampled at the target resolution. Each is degraded the way the
axial direction was acquired: blurred and under-sampled along one image
axis by ``rho``, corrupted with acquisition noise and section artifacts,
then interpolated back to the patch size. The network learns to undo that.

Every pair in a stream is a pure function of ``(seed, domain, index)``, so
streams can be restarted at any index and produced by any number of worker
threads without changing their contents.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from scipy.ndimage import gaussian_filter, gaussian_filter1d

from isoem.errors import ConfigError, SamplingError
from isoem.resample import KERNELS, downsample_axial, resize_plane
from isoem.volume_io import Volume

NOISE_MODELS = ("none", "gaussian", "poisson_gaussian")
ARTIFACT_MODELS = ("none", "stripe", "dropout_lines")
SAMPLERS = ("uniform-random", "grid")

TRAIN_DOMAIN = 0
VALIDATION_DOMAIN = 1


@dataclass
class DegradationConfig:
    """Simulated axial acquisition.

    ``rho=None`` takes the ratio from the volume spacing and
    ``axial_blur_sigma=None`` means ``rho / 2`` high-resolution pixels.
    Stripe period is measured in under-sampled rows.
    """

    rho: Optional[float] = None
    axial_blur_sigma: Optional[float] = None
    kernel: str = "box-average"
    noise: str = "gaussian"
    noise_sigma: float = 0.02
    noise_gain: float = 0.0
    artifact: str = "none"
    stripe_amplitude: float = 0.0
    stripe_period: float = 8.0
    dropout_probability: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.rho is not None and self.rho < 1:
            raise ConfigError(f"rho must be >= 1, got {self.rho}")
        if self.axial_blur_sigma is not None and self.axial_blur_sigma < 0:
            raise ConfigError("axial_blur_sigma must be >= 0")
        if self.kernel not in KERNELS:
            raise ConfigError(f"kernel must be one of {KERNELS}, got {self.kernel!r}")
        if self.noise not in NOISE_MODELS:
            raise ConfigError(f"noise must be one of {NOISE_MODELS}, got {self.noise!r}")
        if self.artifact not in ARTIFACT_MODELS:
            raise ConfigError(f"artifact must be one of {ARTIFACT_MODELS}, got {self.artifact!r}")
        if min(self.noise_sigma, self.noise_gain, self.stripe_amplitude) < 0:
            raise ConfigError("noise_sigma, noise_gain and stripe_amplitude must be >= 0")
        if self.stripe_period <= 0:
            raise ConfigError("stripe_period must be > 0")
        if not 0.0 <= self.dropout_probability <= 1.0:
            raise ConfigError("dropout_probability must lie in [0, 1]")

    def resolved(self, volume: Optional[Volume] = None) -> "DegradationConfig":
        """Fill ``rho`` (from the volume spacing) and the blur default."""
        rho = self.rho
        if rho is None:
            if volume is None:
                raise ConfigError("rho is unset and no volume was given to derive it from")
            rho = volume.rho
        if rho < 1:
            raise ConfigError(f"volume spacing gives rho = {rho:.4g} < 1; axial must be coarsest")
        blur = rho / 2.0 if self.axial_blur_sigma is None else self.axial_blur_sigma
        cfg = DegradationConfig(**{**asdict(self), "rho": float(rho), "axial_blur_sigma": float(blur)})
        return cfg


@dataclass
class PatchSamplingConfig:
    patch_size: int = 48
    patches_per_plane: int = 4
    sampler: str = "uniform-random"
    stride: Optional[int] = None
    min_foreground_std: float = 0.0
    max_retries: int = 100

    def __post_init__(self):
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.patch_size < 2 or self.patches_per_plane < 1 or self.max_retries < 1:
            raise ConfigError("patch_size >= 2, patches_per_plane >= 1 and max_retries >= 1 required")
        if self.stride is not None and self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if self.min_foreground_std < 0:
            raise ConfigError("min_foreground_std must be >= 0")

    @property
    def grid_stride(self) -> int:
        return self.patch_size if self.stride is None else self.stride


@dataclass
class TrainingPair:
    lr: np.ndarray
    gt: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr.shape != self.gt.shape:
            raise ValueError(f"lr {self.lr.shape} and gt {self.gt.shape} differ in shape")


def _grid_positions(n: int, patch: int, stride: int) -> list[int]:
    return list(range(0, n - patch + 1, stride))


def _check_lateral(v: Volume, m: int):
    _, h, w = v.shape
    if h < m or w < m:
        raise SamplingError(f"lateral extent {h}x{w} is smaller than patch size {m}")


def _random_patch(v: Volume, cfg: PatchSamplingConfig, rng: np.random.Generator, z=None):
    m = cfg.patch_size
    nz, h, w = v.shape
    for _ in range(cfg.max_retries):
        k = int(rng.integers(nz)) if z is None else z
        y0 = int(rng.integers(h - m + 1))
        x0 = int(rng.integers(w - m + 1))
        patch = v.voxels[k, y0 : y0 + m, x0 : x0 + m]
        if patch.std() >= cfg.min_foreground_std:
            return np.array(patch, dtype=np.float64), {"plane": k, "origin": (y0, x0)}
    raise SamplingError(
        f"no patch with std >= {cfg.min_foreground_std} found in {cfg.max_retries} tries"
    )


def _grid_patches(v: Volume, cfg: PatchSamplingConfig, planes=None):
    m, s = cfg.patch_size, cfg.grid_stride
    nz, h, w = v.shape
    out = []
    for k in range(nz) if planes is None else planes:
        for y0 in _grid_positions(h, m, s):
            for x0 in _grid_positions(w, m, s):
                patch = v.voxels[k, y0 : y0 + m, x0 : x0 + m]
                if patch.std() >= cfg.min_foreground_std:
                    out.append((k, y0, x0))
    return out


def extract_lateral_patches(v: Volume, cfg: PatchSamplingConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Cut ground-truth patches from every lateral plane.

    ``grid`` returns every accepted tile position of every plane;
    ``uniform-random`` draws ``patches_per_plane`` per plane, rejecting
    patches whose standard deviation is below ``min_foreground_std``.
    """
    _check_lateral(v, cfg.patch_size)
    m = cfg.patch_size
    if cfg.sampler == "grid":
        positions = _grid_patches(v, cfg)
        if not positions:
            raise SamplingError("grid sampler found no patch passing the foreground test")
        return [np.array(v.voxels[k, y : y + m, x : x + m], dtype=np.float64) for k, y, x in positions]
    patches = []
    for k in range(v.shape[0]):
        for _ in range(cfg.patches_per_plane):
            patches.append(_random_patch(v, cfg, rng, z=k)[0])
    return patches


def _apply_noise(img: np.ndarray, cfg: DegradationConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.noise == "gaussian":
        return img + cfg.noise_sigma * rng.standard_normal(img.shape)
    if cfg.noise == "poisson_gaussian":
        out = img
        if cfg.noise_gain > 0:
            out = cfg.noise_gain * rng.poisson(np.clip(img, 0.0, None) / cfg.noise_gain)
        return out + cfg.noise_sigma * rng.standard_normal(img.shape)
    return img


def _apply_artifacts(img: np.ndarray, cfg: DegradationConfig, rng: np.random.Generator) -> np.ndarray:
    # rows of the under-sampled image correspond to physical sections
    if cfg.artifact == "stripe":
        phase = rng.uniform(0.0, 2.0 * math.pi)
        rows = np.arange(img.shape[0])
        offset = cfg.stripe_amplitude * np.sin(2.0 * math.pi * rows / cfg.stripe_period + phase)
        return img + offset[:, None]
    if cfg.artifact == "dropout_lines":
        out = img.copy()
        lost = rng.random(img.shape[0]) < cfg.dropout_probability
        for r in np.flatnonzero(lost):
            # a lost section is filled by its neighbour
            src = r - 1 if r > 0 else min(r + 1, img.shape[0] - 1)
            out[r] = img[src]
        return out
    return img


def simulate_axial(
    gt: np.ndarray, cfg: DegradationConfig, rng: np.random.Generator, axis: int = 0
) -> np.ndarray:
    """Blur, under-sample, add noise and artifacts along ``axis``.

    Accepts 2D patches or whole 3D volumes; the result has
    ``floor(n / rho)`` samples along ``axis`` and is not clipped.
    """
    if cfg.rho is None or cfg.axial_blur_sigma is None:
        raise ConfigError("degradation config must be resolved before use")
    data = np.moveaxis(np.asarray(gt, dtype=np.float64), axis, 0)
    if cfg.axial_blur_sigma > 0:
        data = gaussian_filter1d(data, cfg.axial_blur_sigma, axis=0, mode="reflect")
    data = downsample_axial(data, cfg.rho, cfg.kernel)
    data = _apply_noise(data, cfg, rng)
    data = _apply_artifacts(data, cfg, rng)
    return np.moveaxis(data, 0, axis)


def degrade_patch(gt: np.ndarray, cfg: DegradationConfig, rng: np.random.Generator) -> np.ndarray:
    """Low-resolution counterpart of a square ground-truth patch.

    Degrades along rows, then cubic-resizes back to the input shape and
    clips to [0, 1].
    """
    gt = np.asarray(gt, dtype=np.float64)
    if gt.ndim != 2 or gt.shape[0] != gt.shape[1]:
        raise ValueError(f"expected a square patch, got shape {gt.shape}")
    low = simulate_axial(gt, cfg, rng, axis=0)
    m = gt.shape[0]
    return np.clip(resize_plane(low, m, m, "cubic"), 0.0, 1.0)


def pair_rng(seed: int, domain: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, domain, index])


class PairStream:
    """Reproducible stream of :class:`TrainingPair` drawn from one volume.

    ``length=None`` gives an endless stream. ``workers > 0`` synthesises
    pairs in a thread pool with at most ``prefetch`` pairs in flight; the
    order and content are identical to ``workers=0``.
    """

    def __init__(
        self,
        volume: Volume,
        sampling: PatchSamplingConfig,
        degradation: DegradationConfig,
        length: Optional[int] = None,
        domain: int = TRAIN_DOMAIN,
        workers: int = 0,
        prefetch: int = 64,
    ):
        _check_lateral(volume, sampling.patch_size)
        self.volume = volume
        self.sampling = sampling
        self.degradation = degradation.resolved(volume)
        self.length = length
        self.domain = domain
        self.workers = workers
        self.prefetch = max(1, prefetch)
        self._grid = None
        if sampling.sampler == "grid":
            self._grid = _grid_patches(volume, sampling)
            if not self._grid:
                raise SamplingError("grid sampler found no patch passing the foreground test")

    @property
    def seed(self) -> int:
        return self.degradation.seed

    def __len__(self):
        if self.length is None:
            raise TypeError("endless PairStream has no length")
        return self.length

    def __getitem__(self, index: int) -> TrainingPair:
        if index < 0 or (self.length is not None and index >= self.length):
            raise IndexError(index)
        rng = pair_rng(self.seed, self.domain, index)
        m = self.sampling.patch_size
        if self._grid is not None:
            k, y0, x0 = self._grid[index % len(self._grid)]
            gt = np.array(self.volume.voxels[k, y0 : y0 + m, x0 : x0 + m], dtype=np.float64)
            meta = {"plane": k, "origin": (y0, x0)}
        else:
            gt, meta = _random_patch(self.volume, self.sampling, rng)
        transpose = bool(rng.random() < 0.5)
        src = gt.T if transpose else gt
        lr = degrade_patch(src, self.degradation, rng)
        if transpose:
            lr = lr.T
        meta.update(index=index, orientation="columns" if transpose else "rows")
        return TrainingPair(
            lr=np.ascontiguousarray(lr, dtype=np.float32),
            gt=np.ascontiguousarray(gt, dtype=np.float32),
            meta=meta,
        )

    def iter_from(self, start: int = 0) -> Iterator[TrainingPair]:
        stop = self.length
        indices = iter(range(start, stop)) if stop is not None else _count(start)
        if self.workers <= 0:
            for i in indices:
                yield self[i]
            return
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            pending = []
            for i in indices:
                pending.append(pool.submit(self.__getitem__, i))
                if len(pending) >= self.prefetch:
                    yield pending.pop(0).result()
            for fut in pending:
                yield fut.result()

    def __iter__(self) -> Iterator[TrainingPair]:
        return self.iter_from(0)


def _count(start):
    i = start
    while True:
        yield i
        i += 1


def make_training_pairs(
    v: Volume,
    s: PatchSamplingConfig,
    d: DegradationConfig,
    length: Optional[int] = None,
    domain: int = TRAIN_DOMAIN,
    workers: int = 0,
) -> PairStream:
    return PairStream(v, s, d, length=length, domain=domain, workers=workers)


def write_pair_cache(stream: PairStream, directory, count: int, extra: Optional[dict] = None) -> Path:
    """Export ``count`` pairs as ``pair_#####_{lr,gt}.tif`` plus ``manifest.json``."""
    import tifffile

    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for pair in stream.iter_from(0):
        i = pair.meta["index"]
        if i >= count:
            break
        for name, img in (("lr", pair.lr), ("gt", pair.gt)):
            tifffile.imwrite(out / f"pair_{i:05d}_{name}.tif", img, metadata=None)
        entries.append({"index": i, "plane": pair.meta["plane"], "origin": list(pair.meta["origin"]),
                        "orientation": pair.meta["orientation"]})
    manifest = {
        "seed": stream.seed,
        "count": len(entries),
        "sampling": asdict(stream.sampling),
        "degradation": asdict(stream.degradation),
        "pairs": entries,
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def read_pair_cache(directory) -> list[TrainingPair]:
    import tifffile

    root = Path(directory)
    manifest = json.loads((root / "manifest.json").read_text())
    pairs = []
    for entry in manifest["pairs"]:
        i = entry["index"]
        lr = tifffile.imread(root / f"pair_{i:05d}_lr.tif")
        gt = tifffile.imread(root / f"pair_{i:05d}_gt.tif")
        pairs.append(TrainingPair(lr, gt, dict(entry)))
    return pairs


def generate_phantom_volume(
    size, structure_scale: float = 6.0, seed: int = 0, spacing_nm: float = 15.0
) -> Volume:
    """Random cell-like phantom with dark membranes, values in [0, 1].

    Cells are the sign regions of an isotropically smoothed Gaussian
    random field; membranes are thin dark shells on its zero level set.
    A second, coarser field modulates cytoplasm brightness and a sparse
    set of small dark vesicles adds fine detail. Smoothing is periodic and
    isotropic, so every axis has the same statistics.
    """
    size = tuple(int(s) for s in (size if np.iterable(size) else (size,) * 3))
    if len(size) != 3 or min(size) < 8:
        raise ConfigError(f"phantom size must be three sizes >= 8, got {size}")
    if structure_scale <= 0:
        raise ConfigError("structure_scale must be > 0")
    rng = np.random.default_rng(seed)

    def field(sigma):
        f = gaussian_filter(rng.standard_normal(size), sigma, mode="wrap")
        return (f - f.mean()) / max(f.std(), 1e-12)

    cells = field(structure_scale)
    shade = field(2.0 * structure_scale)
    vesicles = field(max(structure_scale / 4.0, 0.75))

    grad = np.sqrt(sum(g * g for g in np.gradient(cells)))
    width = 0.9 * max(float(np.median(grad)), 1e-6)
    membrane = np.exp(-((cells / width) ** 2))
    body = 0.62 + 0.1 * np.tanh(shade) + 0.06 * np.tanh(cells)
    dots = np.clip((vesicles - 2.2) * 2.0, 0.0, 1.0)
    vol = body * (1.0 - 0.75 * membrane) * (1.0 - 0.5 * dots)
    vol = np.clip(vol, 0.0, 1.0).astype(np.float32)
    return Volume(vol, (spacing_nm,) * 3, f"phantom(size={size},scale={structure_scale},seed={seed})")
