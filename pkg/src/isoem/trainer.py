"""
Adam training over synthesized pairs, validation and checkpoints.

Training state is fully determined by ``(seed, configs, step)``: batch ``t``
consists of stream items ``[t * B, (t + 1) * B)`` and its augmentation is
drawn from ``default_rng([seed, t])``. A checkpoint therefore only needs the
parameters, the Adam moments and the step counter to resume bit-exactly.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from isoem.errors import ConfigError, NumericalError, VolumeIOError
from isoem.losses import LossConfig, projection_directions, total_loss
from isoem.metrics import psnr
from isoem.model import ModelConfig, ViTUNet
from isoem.synth import TrainingPair

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "isoem-checkpoint/1"
SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    betas: Sequence[float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 16
    total_steps: Optional[int] = 50_000
    lr_schedule: str = "constant"
    val_every: int = 0
    val_pairs: int = 32
    checkpoint_every: int = 0
    augment: bool = True
    clip_grad: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1 or (self.total_steps is not None and self.total_steps < 1):
            raise ConfigError("batch_size and total_steps must be >= 1")
        if self.lr_schedule not in SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {SCHEDULES}, got {self.lr_schedule!r}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if min(self.val_every, self.checkpoint_every, self.val_pairs) < 0:
            raise ConfigError("val_every, checkpoint_every and val_pairs must be >= 0")
        if self.clip_grad is not None and self.clip_grad <= 0:
            raise ConfigError("clip_grad must be > 0 when set")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "cosine":
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * step / self.total_steps))
        return self.lr


@dataclass
class Checkpoint:
    model_config: ModelConfig
    model_state: dict
    optimizer_state: Optional[dict]
    train_config: TrainConfig
    loss_config: LossConfig
    step: int
    directions: np.ndarray
    history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def build_model(self, dtype: torch.dtype = torch.float32) -> ViTUNet:
        model = ViTUNet(self.model_config).to(dtype)
        model.load_state_dict(self.model_state)
        model.eval()
        return model


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_config": ckpt.model_config.to_dict(),
        "model_state": ckpt.model_state,
        "optimizer_state": ckpt.optimizer_state,
        "train_config": ckpt.train_config.to_dict(),
        "loss_config": ckpt.loss_config.to_dict(),
        "step": ckpt.step,
        "directions": torch.from_numpy(np.ascontiguousarray(ckpt.directions)),
        "history": ckpt.history,
        "extra": ckpt.extra,
    }
    path = Path(path)
    buf = io.BytesIO()
    torch.save(payload, buf)
    try:
        path.write_bytes(buf.getvalue())
    except OSError as exc:
        raise VolumeIOError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise VolumeIOError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise VolumeIOError(f"corrupt or unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise VolumeIOError(f"{path} is not an {CHECKPOINT_FORMAT} file")
    try:
        return Checkpoint(
            model_config=ModelConfig(**payload["model_config"]),
            model_state=payload["model_state"],
            optimizer_state=payload["optimizer_state"],
            train_config=TrainConfig(**payload["train_config"]),
            loss_config=LossConfig(**payload["loss_config"]),
            step=int(payload["step"]),
            directions=payload["directions"].numpy(),
            history=list(payload.get("history", [])),
            extra=dict(payload.get("extra", {})),
        )
    except (KeyError, TypeError, ConfigError) as exc:
        raise VolumeIOError(f"checkpoint {path} is incomplete: {exc}") from exc


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def augment_pair(lr: np.ndarray, gt: np.ndarray, rng: np.random.Generator):
    """Apply one of the 8 flip/rot90 symmetries to both images."""
    k = int(rng.integers(4))
    flip = bool(rng.integers(2))
    lr, gt = np.rot90(lr, k), np.rot90(gt, k)
    if flip:
        lr, gt = lr[:, ::-1], gt[:, ::-1]
    return lr, gt


def _batch(pairs: Sequence[TrainingPair], dtype, rng=None):
    lrs, gts = [], []
    for p in pairs:
        lr, gt = (p.lr, p.gt) if rng is None else augment_pair(p.lr, p.gt, rng)
        lrs.append(np.ascontiguousarray(lr))
        gts.append(np.ascontiguousarray(gt))
    lr_t = torch.from_numpy(np.stack(lrs)[:, None]).to(dtype)
    gt_t = torch.from_numpy(np.stack(gts)[:, None]).to(dtype)
    return lr_t, gt_t


def _pair_iterator(pairs, start: int):
    if hasattr(pairs, "iter_from"):
        return pairs.iter_from(start)
    it = iter(pairs)
    for _ in range(start):
        next(it)
    return it


def _dump_batch(path: Optional[Path], step: int, lr, gt, pred):
    if path is None:
        return None
    path.mkdir(parents=True, exist_ok=True)
    out = path / f"nonfinite_step{step:07d}.npz"
    np.savez(out, lr=lr.detach().double().numpy(), gt=gt.detach().double().numpy(),
             pred=pred.detach().double().numpy())
    return out


def _model_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def train(
    model: ViTUNet,
    pairs: Iterable[TrainingPair],
    loss_cfg: LossConfig,
    cfg: TrainConfig,
    resume: Optional[Checkpoint] = None,
    val_pairs: Optional[Sequence[TrainingPair]] = None,
    checkpoint_dir=None,
    metrics_log=None,
    on_step: Optional[Callable[[dict], None]] = None,
    extra: Optional[dict] = None,
) -> Checkpoint:
    """Run ``cfg.total_steps`` Adam updates of ``model`` on ``total_loss``.

    With ``resume`` the parameters, moments and step counter are restored and
    training continues from there; the stream is advanced past the pairs the
    earlier run consumed. Periodic checkpoints go to ``checkpoint_dir`` as
    ``step_#######.pt`` and one JSON object per step is appended to
    ``metrics_log``. A non-finite loss raises :class:`NumericalError` after
    dumping the batch next to the checkpoints.
    """
    if cfg.total_steps is None:
        raise ConfigError("total_steps is unset")
    dtype = _model_dtype(model)
    directions_np = projection_directions(loss_cfg)
    directions = torch.from_numpy(directions_np).to(dtype)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    step, history = 0, []
    if resume is not None:
        model.load_state_dict(resume.model_state)
        if resume.optimizer_state is not None:
            opt.load_state_dict(resume.optimizer_state)
        step, history = resume.step, list(resume.history)
        if step > cfg.total_steps:
            raise ConfigError(f"checkpoint is at step {step}, beyond total_steps {cfg.total_steps}")
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_file = open(metrics_log, "a" if resume is not None else "w") if metrics_log else None

    def snapshot():
        return Checkpoint(
            model_config=model.cfg,
            model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
            optimizer_state=opt.state_dict(),
            train_config=cfg,
            loss_config=loss_cfg,
            step=step,
            directions=directions_np,
            history=list(history),
            extra=dict(extra or {}),
        )

    stream = _pair_iterator(pairs, step * cfg.batch_size)
    model.train()
    try:
        while step < cfg.total_steps:
            chunk = []
            for _ in range(cfg.batch_size):
                try:
                    chunk.append(next(stream))
                except StopIteration:
                    raise ConfigError(
                        f"pair stream exhausted at step {step} of {cfg.total_steps}"
                    ) from None
            rng = np.random.default_rng([cfg.seed, step]) if cfg.augment else None
            lr_t, gt_t = _batch(chunk, dtype, rng)
            for group in opt.param_groups:
                group["lr"] = cfg.lr_at(step)
            pred = model(lr_t)
            loss, l1, pdl = total_loss(pred, gt_t, loss_cfg, directions, parts=True)
            if not torch.isfinite(loss):
                dump = _dump_batch(ckpt_dir, step, lr_t, gt_t, pred)
                raise NumericalError(f"non-finite loss {loss.item()} at step {step}; batch dumped to {dump}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.clip_grad is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_grad)
            opt.step()
            step += 1
            record = {"step": step, "loss": loss.item(), "l1": l1.item(), "pdl": pdl.item(),
                      "lr": cfg.lr_at(step - 1)}
            if val_pairs is not None and cfg.val_every and step % cfg.val_every == 0:
                summary = validate(model, val_pairs, loss_cfg)
                record.update(val_loss=summary["loss"], val_psnr=summary["psnr"])
                model.train()
            history.append(record)
            if log_file:
                log_file.write(json.dumps(_jsonable(record), sort_keys=True) + "\n")
            if on_step:
                on_step(record)
            if ckpt_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(snapshot(), ckpt_dir / f"step_{step:07d}.pt")
    finally:
        if log_file:
            log_file.close()
    model.eval()
    return snapshot()


def _jsonable(record: dict) -> dict:
    return {k: ("inf" if isinstance(v, float) and math.isinf(v) else v) for k, v in record.items()}


def validate(model: Callable, held_out: Sequence[TrainingPair], loss_cfg: LossConfig) -> dict:
    """Loss and PSNR (pooled over all pixels) on held-out pairs; never updates ``model``."""
    held_out = list(held_out)
    if not held_out:
        raise ConfigError("validation set is empty")
    was_training = getattr(model, "training", False)
    if isinstance(model, nn.Module):
        model.eval()
    try:
        dtype = _model_dtype(model)
    except (StopIteration, AttributeError):
        dtype = torch.float64
    directions = torch.from_numpy(projection_directions(loss_cfg)).to(dtype)
    preds, gts, losses = [], [], []
    with torch.no_grad():
        for pair in held_out:
            lr_t, gt_t = _batch([pair], dtype)
            pred = model(lr_t)
            losses.append(total_loss(pred, gt_t, loss_cfg, directions).item())
            preds.append(pred[0, 0].double().numpy())
            gts.append(gt_t[0, 0].double().numpy())
    if was_training and isinstance(model, nn.Module):
        model.train()
    return {"loss": float(np.mean(losses)), "psnr": psnr(np.stack(preds), np.stack(gts))}
