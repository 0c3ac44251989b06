"""
Synthetic evaluation: under-sample an isotropic volume axially, reconstruct
it with the cubic baseline and with a model, and score both against the
original.

Reconstructed slice ``j`` lines up with original slice ``j`` (pixel-centre
resampling on both sides), so scoring uses the first ``min(n_z, n_z')``
slices minus an axial margin at each end. Volume PSNR pools all voxels;
volume SSIM is the mean 2D SSIM of the xz planes.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from isoem.errors import ConfigError, GeometryError
from isoem.metrics import SSIM_K1, SSIM_K2, SSIM_WINDOW, psnr, volume_ssim
from isoem.model import IdentityModel
from isoem.reconstruct import ReconstructionOptions, reconstruct
from isoem.resample import resize_volume_to_isotropic
from isoem.synth import DegradationConfig, simulate_axial
from isoem.volume_io import Volume

REPORT_FORMAT = "isoem-report/1"


@dataclass
class EvalConfig:
    rho: float = 3.0
    margin: int = 4
    data_range: float = 1.0
    ssim_window: int = SSIM_WINDOW
    ssim_k1: float = SSIM_K1
    ssim_k2: float = SSIM_K2

    def __post_init__(self):
        if self.rho < 1:
            raise ConfigError(f"rho must be >= 1, got {self.rho}")
        if self.margin < 0 or self.ssim_window < 1 or self.data_range <= 0:
            raise ConfigError("margin >= 0, ssim_window >= 1 and data_range > 0 required")


@dataclass
class MethodScore:
    method: str
    psnr: float
    ssim: float


@dataclass
class ReconstructionReport:
    rows: list[MethodScore]
    geometry: dict
    settings: dict = field(default_factory=dict)

    def row(self, method: str) -> MethodScore:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "rows": [
                {"method": r.method, "psnr_db": _num(r.psnr), "ssim": r.ssim} for r in self.rows
            ],
            "geometry": self.geometry,
            "settings": self.settings,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReconstructionReport":
        if d.get("format") != REPORT_FORMAT:
            raise ValueError(f"not an {REPORT_FORMAT} document")
        rows = [MethodScore(r["method"], _denum(r["psnr_db"]), float(r["ssim"])) for r in d["rows"]]
        return cls(rows, d["geometry"], d.get("settings", {}))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        """Metrics as rows, methods as columns."""
        names = [r.method for r in self.rows]
        width = max(8, *(len(n) for n in names))
        sep = "+" + "-" * 8 + "+" + "+".join("-" * (width + 2) for _ in names) + "+"
        lines = [sep, "| Metric |" + "|".join(f" {n:^{width}} " for n in names) + "|", sep]
        psnrs = " ".join(f"{_fmt_db(r.psnr):>{width}} |" for r in self.rows)
        ssims = " ".join(f"{r.ssim:>{width}.4f} |" for r in self.rows)
        lines.append(f"| PSNR   | {psnrs}")
        lines.append(f"| SSIM   | {ssims}")
        lines.append(sep)
        return "\n".join(lines) + "\n"


def _num(x: float):
    return "inf" if math.isinf(x) else x


def _denum(x) -> float:
    return math.inf if x == "inf" else float(x)


def _fmt_db(x: float) -> str:
    return "inf" if math.isinf(x) else f"{x:.2f}"


def simulate_anisotropic(iso: Volume, degradation: DegradationConfig) -> Volume:
    """Axially under-sample an isotropic volume with the acquisition model."""
    if not iso.is_isotropic:
        raise GeometryError(f"ground truth must be isotropic, got spacing {iso.spacing}")
    cfg = degradation.resolved()
    rng = np.random.default_rng([cfg.seed, 2])
    data = simulate_axial(np.asarray(iso.voxels, dtype=np.float64), cfg, rng, axis=0)
    s = iso.spacing[0]
    return iso.with_step(
        f"axial_undersample(rho={cfg.rho:g})",
        voxels=np.clip(data, 0.0, 1.0).astype(np.float32),
        spacing=(s * cfg.rho, s, s),
    )


def score(recon: np.ndarray, gt: np.ndarray, cfg: EvalConfig) -> tuple[float, float]:
    return (
        psnr(recon, gt, cfg.data_range),
        volume_ssim(recon, gt, cfg.data_range, cfg.ssim_window, cfg.ssim_k1, cfg.ssim_k2),
    )


def scoring_region(n_gt: int, n_rec: int, margin: int) -> slice:
    n = min(n_gt, n_rec)
    if n - 2 * margin < 1:
        raise GeometryError(f"{n} slices leave nothing to score with an axial margin of {margin}")
    return slice(margin, n - margin)


def evaluate_synthetic(
    iso: Volume,
    degradation: DegradationConfig,
    model: Optional[Callable] = None,
    opts: Optional[ReconstructionOptions] = None,
    cfg: Optional[EvalConfig] = None,
    train_fn: Optional[Callable[[Volume], Callable]] = None,
    settings: Optional[dict] = None,
):
    """Score cubic and model reconstructions of a synthetically degraded volume.

    Either pass a trained ``model`` or a ``train_fn`` that receives the
    anisotropic volume and returns one (self-supervised training on the
    volume being reconstructed). Returns ``(report, volumes)`` where
    ``volumes`` maps ``anisotropic``, ``cubic`` and ``model`` to Volumes.
    """
    cfg = cfg or EvalConfig()
    opts = opts or ReconstructionOptions()
    if degradation.rho is None:
        degradation = DegradationConfig(**{**asdict(degradation), "rho": cfg.rho})
    aniso = simulate_anisotropic(iso, degradation)
    if model is None:
        if train_fn is None:
            raise ConfigError("evaluate_synthetic needs a model or a train_fn")
        model = train_fn(aniso)
    cubic = resize_volume_to_isotropic(aniso, "cubic")
    cubic = cubic.replace(voxels=np.clip(cubic.voxels, 0.0, 1.0))
    recon = reconstruct(aniso, model, opts)
    gt = np.asarray(iso.voxels, dtype=np.float64)
    region = scoring_region(gt.shape[0], recon.shape[0], cfg.margin)
    rows = []
    for name, vol in (("cubic", cubic), ("model", recon)):
        p, s = score(np.asarray(vol.voxels, dtype=np.float64)[region], gt[region], cfg)
        rows.append(MethodScore(name, p, s))
    geometry = {
        "ground_truth_shape": list(iso.shape),
        "ground_truth_spacing_nm": list(iso.spacing),
        "anisotropic_shape": list(aniso.shape),
        "anisotropic_spacing_nm": list(aniso.spacing),
        "reconstruction_shape": list(recon.shape),
        "scored_z_range": [region.start, region.stop],
    }
    report_settings = {
        "psnr": "pooled over all scored voxels",
        "ssim": "mean 2D SSIM over xz planes",
        "eval": asdict(cfg),
        "degradation": asdict(degradation.resolved()),
        "reconstruction": opts.to_dict(),
    }
    report_settings.update(settings or {})
    report = ReconstructionReport(rows, geometry, report_settings)
    return report, {"anisotropic": aniso, "cubic": cubic, "model": recon}


def identity_model() -> IdentityModel:
    return IdentityModel()


def write_report(report: ReconstructionReport, out_dir, volumes: Optional[dict] = None, gt: Optional[Volume] = None) -> dict:
    """Write ``report.json``, ``report.txt`` and optional ``preview_*.png`` center xz crops."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "report.json", "table": out / "report.txt"}
    paths["json"].write_text(report.to_json())
    paths["table"].write_text(report.to_table())
    if volumes is not None:
        items = [("ground_truth", gt)] if gt is not None else []
        items += [(k, volumes[k]) for k in ("cubic", "model") if k in volumes]
        for name, vol in items:
            p = out / f"preview_{name}.png"
            write_preview(vol, p)
            paths[f"preview_{name}"] = p
    return paths


def center_xz_crop(v: Volume, size: int = 128) -> np.ndarray:
    data = np.asarray(v.voxels)
    plane = data[:, data.shape[1] // 2, :]
    h, w = plane.shape
    r0, c0 = max(0, (h - size) // 2), max(0, (w - size) // 2)
    return plane[r0 : r0 + size, c0 : c0 + size]


def write_preview(v: Volume, path, size: int = 128):
    from PIL import Image

    crop = np.clip(np.asarray(center_xz_crop(v, size), dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(crop * 255).astype(np.uint8)).save(path)
