"""
Training objective: mean absolute error plus a projected distribution loss.

The distribution term cuts both images into non-overlapping
``patch x patch`` tiles, flattens each tile to a vector, projects all
vectors onto ``R`` fixed random unit directions and compares the two
projected populations with the 1D Wasserstein-1 distance (mean absolute
difference of the sorted values). It is averaged over directions and then
over batch items. Directions are drawn once from ``LossConfig.seed`` and
saved with checkpoints.

At ties the sort order is the stable one, so the sub-gradient pairs tied
values by their original tile order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch

from isoem.errors import ConfigError


@dataclass
class LossConfig:
    alpha: float = 0.01
    pdl_projections: int = 32
    pdl_patch: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.pdl_projections < 1 or self.pdl_patch < 1:
            raise ConfigError("pdl_projections and pdl_patch must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def projection_directions(cfg: LossConfig) -> np.ndarray:
    """(R, patch*patch) unit vectors, a pure function of the config."""
    rng = np.random.default_rng(cfg.seed)
    d = rng.standard_normal((cfg.pdl_projections, cfg.pdl_patch**2))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _as_batch(t: torch.Tensor) -> torch.Tensor:
    # accept (H, W), (B, H, W) or (B, 1, H, W)
    if t.ndim == 2:
        return t[None]
    if t.ndim == 4:
        if t.shape[1] != 1:
            raise ValueError(f"expected one channel, got shape {tuple(t.shape)}")
        return t[:, 0]
    if t.ndim != 3:
        raise ValueError(f"unsupported image batch shape {tuple(t.shape)}")
    return t


def _check_shapes(pred, gt):
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")


def l1_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    _check_shapes(pred, gt)
    return (pred - gt).abs().mean()


def patch_vectors(img: torch.Tensor, patch: int) -> torch.Tensor:
    """(B, H, W) -> (B, n_tiles, patch*patch); trailing rows/cols that do not fill a tile are dropped."""
    b, h, w = img.shape
    nh, nw = h // patch, w // patch
    img = img[:, : nh * patch, : nw * patch]
    tiles = img.reshape(b, nh, patch, nw, patch).permute(0, 1, 3, 2, 4)
    return tiles.reshape(b, nh * nw, patch * patch)


def pdl_loss(
    pred: torch.Tensor,
    gt: torch.Tensor,
    cfg: LossConfig,
    directions: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    _check_shapes(pred, gt)
    p, q = _as_batch(pred), _as_batch(gt)
    h, w = p.shape[-2:]
    if h < cfg.pdl_patch or w < cfg.pdl_patch:
        raise ValueError(f"image {h}x{w} is smaller than the PDL patch {cfg.pdl_patch}")
    if directions is None:
        directions = torch.from_numpy(projection_directions(cfg))
    u = directions.to(dtype=p.dtype, device=p.device).T
    proj_p = patch_vectors(p, cfg.pdl_patch) @ u
    proj_q = patch_vectors(q, cfg.pdl_patch) @ u
    sp = torch.sort(proj_p, dim=1, stable=True).values
    sq = torch.sort(proj_q, dim=1, stable=True).values
    return (sp - sq).abs().mean()


def total_loss(
    pred: torch.Tensor,
    gt: torch.Tensor,
    cfg: LossConfig,
    directions: Optional[torch.Tensor] = None,
    parts: bool = False,
):
    """``l1 + alpha * pdl``; with ``parts=True`` also returns both terms."""
    l1 = l1_loss(pred, gt)
    if cfg.alpha == 0:
        pdl = torch.zeros((), dtype=l1.dtype)
        total = l1
    else:
        pdl = pdl_loss(pred, gt, cfg, directions)
        total = l1 + cfg.alpha * pdl
    return (total, l1, pdl) if parts else total
