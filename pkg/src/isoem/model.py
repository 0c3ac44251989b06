"""
U-shaped windowed-attention network for single-channel plane restoration.

Pipeline for an input ``1 x H x W``::

    stem (3x3 conv)                      -> X0, C channels
    K-1 encoder levels:   ViT blocks, 2x2 stride-2 conv (channels x2)
    bottleneck:           ViT blocks at 2^(K-1) C channels
    K-1 decoder levels:   2x2 transposed conv (channels /2), concat skip,
                          1x1 merge, ViT blocks
    X0 + decoder output -> 3x3 conv head -> 1 channel

A ViT block is ``X' = X + W-MSA(LN(X))`` followed by
``X'' = X' + GLEN(LN(X'))``. The first residual can be switched off with
``ModelConfig.attn_residual`` to run the block exactly as
``X' = W-MSA(LN(X))``.

Inputs of any size ``>= window_size`` are accepted: they are padded
(reflect where possible) up to a multiple of ``2^(K-1) * window_size``
and the output is cropped back.

Parameter count, with ``C_l = 2^l C``, ``h_l`` heads,
``e_l = floor(glen_expansion * C_l)`` hidden GLEN channels, ``n`` blocks per
level and ``P = (2M - 1)^2``::

    block(l) = 4 C_l^2 + 6 C_l + h_l P + 3 C_l e_l + 22 e_l
    total    = 10 C + (9 C + 1)
             + sum_{l<K-1} [ 2 n block(l) + (8 C_l^2 + 2 C_l)
                             + (8 C_l^2 + C_l) + (2 C_l^2 + C_l) ]
             + n block(K-1)

(stem, head; per non-bottleneck level: encoder+decoder blocks, down conv,
up conv, merge conv; bottleneck blocks). :func:`expected_parameter_count`
evaluates it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from isoem.errors import ConfigError, NumericalError


@dataclass
class ModelConfig:
    base_channels: int = 16
    levels: int = 3
    window_size: int = 8
    heads_per_level: Sequence[int] = (2, 4, 8)
    glen_expansion: float = 2.0
    blocks_per_level: int = 2
    attn_residual: bool = True

    def __post_init__(self):
        self.heads_per_level = tuple(int(h) for h in self.heads_per_level)
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.base_channels < 1 or self.blocks_per_level < 1:
            raise ConfigError("base_channels and blocks_per_level must be >= 1")
        if self.window_size < 2:
            raise ConfigError(f"window_size must be >= 2, got {self.window_size}")
        if self.glen_expansion < 1:
            raise ConfigError(f"glen_expansion must be >= 1, got {self.glen_expansion}")
        if len(self.heads_per_level) != self.levels:
            raise ConfigError(
                f"heads_per_level has {len(self.heads_per_level)} entries for {self.levels} levels"
            )
        for lvl, heads in enumerate(self.heads_per_level):
            ch = self.channels(lvl)
            if heads < 1 or ch % heads:
                raise ConfigError(f"level {lvl}: {heads} heads do not divide {ch} channels")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def hidden(self, level: int) -> int:
        return int(self.glen_expansion * self.channels(level))

    @property
    def size_multiple(self) -> int:
        return 2 ** (self.levels - 1) * self.window_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["heads_per_level"] = list(self.heads_per_level)
        return d


PROFILES = {
    "default": ModelConfig(),
    "tiny": ModelConfig(base_channels=8, levels=2, window_size=4, heads_per_level=(2, 4)),
}


def expected_parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count (see module docstring)."""
    n, p = cfg.blocks_per_level, (2 * cfg.window_size - 1) ** 2

    def block(lvl):
        c, e, h = cfg.channels(lvl), cfg.hidden(lvl), cfg.heads_per_level[lvl]
        return 4 * c * c + 6 * c + h * p + 3 * c * e + 22 * e

    c0 = cfg.base_channels
    total = 10 * c0 + 9 * c0 + 1
    for lvl in range(cfg.levels - 1):
        c = cfg.channels(lvl)
        total += 2 * n * block(lvl) + (8 * c * c + 2 * c) + (8 * c * c + c) + (2 * c * c + c)
    return total + n * block(cfg.levels - 1)


def window_partition(x: torch.Tensor, m: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * N, m*m, C) with windows in row-major order."""
    b, h, w, c = x.shape
    if h % m or w % m:
        raise ValueError(f"feature map {h}x{w} is not divisible by window size {m}")
    x = x.view(b, h // m, m, w // m, m, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, m * m, c)


def window_merge(windows: torch.Tensor, m: int, h: int, w: int) -> torch.Tensor:
    """Inverse of :func:`window_partition`."""
    if h % m or w % m:
        raise ValueError(f"feature map {h}x{w} is not divisible by window size {m}")
    c = windows.shape[-1]
    b = windows.shape[0] // ((h // m) * (w // m))
    x = windows.view(b, h // m, w // m, m, m, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)


def relative_position_index(m: int) -> torch.Tensor:
    """(m*m, m*m) index into a (2m-1)^2 bias table, by pairwise offset."""
    coords = torch.stack(torch.meshgrid(torch.arange(m), torch.arange(m), indexing="ij")).flatten(1)
    rel = coords[:, :, None] - coords[:, None, :] + (m - 1)
    return rel[0] * (2 * m - 1) + rel[1]


class WindowAttention(nn.Module):
    """Multi-head self-attention inside each window with relative position bias."""

    def __init__(self, dim: int, window_size: int, num_heads: int):
        super().__init__()
        self.dim = dim
        self.window_size = window_size
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim, bias=False)
        self.proj = nn.Linear(dim, dim)
        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * window_size - 1) ** 2, num_heads)
        )
        self.register_buffer(
            "relative_position_index", relative_position_index(window_size), persistent=False
        )

    def _heads(self, t: torch.Tensor) -> torch.Tensor:
        n, t_len, _ = t.shape
        return t.view(n, t_len, self.num_heads, self.head_dim).transpose(1, 2)

    def bias(self) -> torch.Tensor:
        t = self.window_size**2
        b = self.relative_position_bias_table[self.relative_position_index.view(-1)]
        return b.view(t, t, self.num_heads).permute(2, 0, 1)

    def attend(self, windows: torch.Tensor):
        """Head-concatenated attention output before projection, and the attention maps."""
        q, k, v = (self._heads(f(windows)) for f in (self.q, self.k, self.v))
        logits = q @ k.transpose(-2, -1) * self.scale + self.bias().unsqueeze(0)
        attn = logits.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(windows.shape)
        return out, attn

    def forward(self, windows: torch.Tensor) -> torch.Tensor:
        return self.proj(self.attend(windows)[0])


class GLEN(nn.Module):
    """Gated locally-enhanced feed-forward network.

    Two parallel point-wise expansions, each followed by a depth-wise 3x3
    convolution; the gate path goes through GELU and multiplies the value
    path; a point-wise projection returns to ``dim`` channels.
    """

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.value_in = nn.Conv2d(dim, hidden, 1)
        self.gate_in = nn.Conv2d(dim, hidden, 1)
        self.value_dw = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.gate_dw = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.proj = nn.Conv2d(hidden, dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        value = self.value_dw(self.value_in(x))
        gate = F.gelu(self.gate_dw(self.gate_in(x)))
        return self.proj(value * gate)


class ViTBlock(nn.Module):
    def __init__(self, dim: int, window_size: int, num_heads: int, hidden: int, attn_residual: bool = True):
        super().__init__()
        self.window_size = window_size
        self.attn_residual = attn_residual
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window_size, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.glen = GLEN(dim, hidden)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        m = self.window_size
        tokens = x.permute(0, 2, 3, 1)
        attn = window_merge(self.attn(window_partition(self.norm1(tokens), m)), m, h, w)
        tokens = tokens + attn if self.attn_residual else attn
        ff = self.glen(self.norm2(tokens).permute(0, 3, 1, 2))
        return tokens.permute(0, 3, 1, 2) + ff


class ViTUNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        k, n, m = cfg.levels, cfg.blocks_per_level, cfg.window_size

        def blocks(lvl):
            return nn.Sequential(*[
                ViTBlock(cfg.channels(lvl), m, cfg.heads_per_level[lvl], cfg.hidden(lvl), cfg.attn_residual)
                for _ in range(n)
            ])

        self.stem = nn.Conv2d(1, cfg.base_channels, 3, padding=1)
        self.encoders = nn.ModuleList(blocks(lvl) for lvl in range(k - 1))
        self.downs = nn.ModuleList(
            nn.Conv2d(cfg.channels(lvl), cfg.channels(lvl + 1), 2, stride=2) for lvl in range(k - 1)
        )
        self.bottleneck = blocks(k - 1)
        self.ups = nn.ModuleList(
            nn.ConvTranspose2d(cfg.channels(lvl + 1), cfg.channels(lvl), 2, stride=2) for lvl in range(k - 1)
        )
        self.merges = nn.ModuleList(
            nn.Conv2d(2 * cfg.channels(lvl), cfg.channels(lvl), 1) for lvl in range(k - 1)
        )
        self.decoders = nn.ModuleList(blocks(lvl) for lvl in range(k - 1))
        self.head = nn.Conv2d(cfg.base_channels, 1, 3, padding=1)

    def _pad(self, x: torch.Tensor):
        h, w = x.shape[-2:]
        mult = self.cfg.size_multiple
        ph, pw = (-h) % mult, (-w) % mult
        if ph == 0 and pw == 0:
            return x
        mode = "reflect" if ph < h and pw < w else "replicate"
        return F.pad(x, (0, pw, 0, ph), mode=mode)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected a (B, 1, H, W) batch, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if min(h, w) < self.cfg.window_size:
            raise ValueError(f"input {h}x{w} is smaller than the window size {self.cfg.window_size}")
        if not torch.isfinite(x).all():
            raise NumericalError("non-finite values in network input")
        x0 = self.stem(self._pad(x))
        skips, feat = [], x0
        for enc, down in zip(self.encoders, self.downs):
            feat = enc(feat)
            skips.append(feat)
            feat = down(feat)
        feat = self.bottleneck(feat)
        for lvl in reversed(range(self.cfg.levels - 1)):
            feat = self.ups[lvl](feat)
            feat = self.merges[lvl](torch.cat([feat, skips[lvl]], dim=1))
            feat = self.decoders[lvl](feat)
        out = self.head(feat + x0)
        return out[..., :h, :w]


def _fan_in(weight: torch.Tensor, module: nn.Module) -> int:
    if isinstance(module, nn.ConvTranspose2d):
        # weight is (in, out, kh, kw); each output pixel sees in * kh * kw / stride^2 taps
        taps = weight.shape[2] * weight.shape[3] // (module.stride[0] * module.stride[1])
        return weight.shape[0] * max(taps, 1)
    return int(np.prod(weight.shape[1:]))


@torch.no_grad()
def reset_parameters(model: nn.Module, seed: int, zero_head: bool = True) -> nn.Module:
    """Deterministic init.

    Linear/conv weights ~ U(-b, b) with ``b = 1 / sqrt(fan_in)``, biases 0, LayerNorm scale 1 / offset 0,
    relative position bias tables 0. With ``zero_head`` the final projection
    of a :class:`ViTUNet` starts at zero, so the untrained network outputs 0
    and early updates are not fighting a random output map.
    """
    gen = torch.Generator().manual_seed(int(seed))
    for name, module in model.named_modules():
        if isinstance(module, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
            bound = 1.0 / math.sqrt(_fan_in(module.weight, module))
            w = torch.rand(module.weight.shape, generator=gen, dtype=torch.float64) * 2 - 1
            module.weight.copy_(w * bound)
            if module.bias is not None:
                module.bias.zero_()
        elif isinstance(module, nn.LayerNorm):
            module.weight.fill_(1.0)
            module.bias.zero_()
        elif isinstance(module, WindowAttention):
            module.relative_position_bias_table.zero_()
    if zero_head and isinstance(model, ViTUNet):
        model.head.weight.zero_()
    return model


def init_model(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32, zero_head: bool = True) -> ViTUNet:
    model = ViTUNet(cfg).to(dtype)
    return reset_parameters(model, seed, zero_head)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


class IdentityModel(nn.Module):
    """Stand-in network that returns its input; reduces reconstruction to interpolation."""

    def forward(self, x):
        return x


def predict(model: nn.Module, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Run ``model`` over a stack of 2D images (N, H, W) without tracking gradients."""
    images = np.asarray(images)
    try:
        dtype = next(model.parameters()).dtype
    except StopIteration:
        dtype = torch.float32
    outs = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            chunk = torch.from_numpy(np.ascontiguousarray(images[i : i + batch_size])).to(dtype)
            outs.append(model(chunk[:, None]).squeeze(1).double().numpy())
    return np.concatenate(outs) if outs else np.zeros((0,) + images.shape[1:])
