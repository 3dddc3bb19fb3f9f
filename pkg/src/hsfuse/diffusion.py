"""Latent multimodal diffusion: noise schedule and the two-branch fusion U-Net.

Tensors inside the network are channels-first (B, C, H, W), the torch
convention; patch arrays coming from :mod:`hsfuse.data_io` are channels-last
and get permuted once at the model boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

FUSION_STRATEGIES = ("rdaf", "none", "sum", "concat", "weighted_sum", "weighted_concat")


# --------------------------------------------------------------------------
# schedule and forward process
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: np.ndarray  # (T,) float64, beta[i] is beta_{i+1}
    alpha_bar: np.ndarray  # (T,) float64

    @property
    def T(self) -> int:
        return int(self.beta.shape[0])


def make_schedule(T: int, beta_start: float, beta_end: float) -> DiffusionSchedule:
    """Linear beta schedule with exact cumulative products."""
    if T < 1:
        raise ConfigError("T", f"must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(
            "beta", f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = beta_start + (beta_end - beta_start) * np.arange(T, dtype=np.float64) / (T - 1)
    return DiffusionSchedule(beta=beta, alpha_bar=np.cumprod(1.0 - beta))


def _coefficients(t, sched: DiffusionSchedule, ndim: int):
    t_arr = np.asarray(t, dtype=np.int64)
    if t_arr.size == 0 or t_arr.min() < 1 or t_arr.max() > sched.T:
        raise ConfigError("t", f"timesteps must lie in 1..{sched.T}")
    ab = sched.alpha_bar[t_arr - 1]
    if ab.ndim == 1:
        ab = ab.reshape(-1, *([1] * (ndim - 1)))
    return np.sqrt(ab), np.sqrt(1.0 - ab)


def forward_diffuse(x0, t, noise, sched: DiffusionSchedule):
    """Sample x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise.

    ``t`` is a scalar or a per-sample array (1-based). Accepts numpy arrays or
    torch tensors; the result has the type and dtype of ``x0``.
    """
    if tuple(noise.shape) != tuple(x0.shape):
        raise ConfigError("noise", f"shape {tuple(noise.shape)} does not match x0 {tuple(x0.shape)}")
    a, b = _coefficients(t, sched, x0.ndim)
    if isinstance(x0, torch.Tensor):
        a = torch.as_tensor(a, dtype=x0.dtype, device=x0.device)
        b = torch.as_tensor(b, dtype=x0.dtype, device=x0.device)
        return a * x0 + b * noise
    return (a * x0 + b * noise).astype(x0.dtype, copy=False)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------


class ResBlock(nn.Module):
    """Two conv-BN-ReLU stages plus an identity (or 1x1-projected) skip."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, 1, 1)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.skip = nn.Identity() if in_ch == out_ch else nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.bn1(self.conv1(x)))
        h = F.relu(self.bn2(self.conv2(h)))
        return h + self.skip(x)


class Down(nn.Module):
    """Max-pool (ceil mode), 1x1 projection, plus a projected timestep embedding."""

    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, out_ch, 1)
        self.time = nn.Linear(temb_dim, out_ch)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.proj(F.max_pool2d(x, 2, 2, ceil_mode=True))
        return h + self.time(temb)[:, :, None, None]


class Up(nn.Module):
    """Bilinear upsample to the skip size, concat the skip, conv-merge, add time."""

    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.merge = nn.Conv2d(in_ch + skip_ch, out_ch, 3, 1, 1)
        self.time = nn.Linear(temb_dim, out_ch)

    def forward(self, x: torch.Tensor, skip: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        up = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        h = self.merge(torch.cat([skip, up], dim=1))
        return h + self.time(temb)[:, :, None, None]


# --------------------------------------------------------------------------
# encoder / fusion / decoder
# --------------------------------------------------------------------------


class Encoder(nn.Module):
    """Residual encoder; a Down step follows every block except the last."""

    def __init__(self, in_ch: int, filters: Sequence[int], temb_dim: int):
        super().__init__()
        filters = list(filters)
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = in_ch
        for i, f in enumerate(filters):
            self.blocks.append(ResBlock(prev, f))
            if i < len(filters) - 1:
                self.downs.append(Down(f, filters[i + 1], temb_dim))
                prev = filters[i + 1]
            else:
                prev = f

    def forward(self, x: torch.Tensor, temb: torch.Tensor):
        if min(x.shape[-2:]) < 4:
            raise ConfigError("patch", f"encoder needs spatial dims >= 4, got {tuple(x.shape[-2:])}")
        skips = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i < len(self.downs):
                skips.append(x)
                x = self.downs[i](x, temb)
        return x, skips


class AdaptiveFusion(nn.Module):
    """Spatial two-way softmax masks weighting each modality before a merge conv."""

    separate = False

    def __init__(self, ch: int, out_ch: int):
        super().__init__()
        self.mask_conv = nn.Conv2d(2 * ch, 2, 3, 1, 1)
        self.merge = nn.Conv2d(2 * ch, out_ch, 3, 1, 1)

    def forward(self, x_hsi: torch.Tensor, x_lid: torch.Tensor):
        _check_pair(x_hsi, x_lid)
        masks = torch.softmax(self.mask_conv(torch.cat([x_hsi, x_lid], dim=1)), dim=1)
        m_hsi, m_lid = masks[:, 0:1], masks[:, 1:2]
        fused = self.merge(torch.cat([x_hsi * m_hsi, x_lid * m_lid], dim=1))
        return fused, (m_hsi, m_lid)


class SimpleFusion(nn.Module):
    """Non-adaptive fusion baselines: none, sum, concat and their weighted forms.

    ``none`` passes both branches through untouched; the decoder then routes
    each half back to its own branch so the modalities never mix.
    """

    def __init__(self, strategy: str, ch: int, out_ch: int):
        super().__init__()
        self.strategy = strategy
        self.separate = strategy == "none"
        if strategy in ("weighted_sum", "weighted_concat"):
            self.logits = nn.Parameter(torch.zeros(2))
        if strategy in ("sum", "weighted_sum"):
            self.merge = nn.Conv2d(ch, out_ch, 3, 1, 1)
        elif strategy in ("concat", "weighted_concat"):
            self.merge = nn.Conv2d(2 * ch, out_ch, 3, 1, 1)
        elif strategy != "none":
            raise ConfigError("fusion_strategy", f"unknown strategy {strategy!r}")

    def forward(self, x_hsi: torch.Tensor, x_lid: torch.Tensor):
        _check_pair(x_hsi, x_lid)
        s = self.strategy
        if s == "none":
            return torch.cat([x_hsi, x_lid], dim=1), None
        if s.startswith("weighted"):
            w = torch.softmax(self.logits, dim=0)
            x_hsi, x_lid = w[0] * x_hsi, w[1] * x_lid
        if s.endswith("sum"):
            return self.merge(x_hsi + x_lid), None
        return self.merge(torch.cat([x_hsi, x_lid], dim=1)), None


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ConfigError("fusion", f"branch shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def make_fusion(strategy: str, ch: int, out_ch: int) -> nn.Module:
    if strategy == "rdaf":
        return AdaptiveFusion(ch, out_ch)
    if strategy not in FUSION_STRATEGIES:
        raise ConfigError("fusion_strategy", f"must be one of {FUSION_STRATEGIES}, got {strategy!r}")
    return SimpleFusion(strategy, ch, out_ch)


class DecoderBranch(nn.Module):
    def __init__(self, filters: Sequence[int], skip_channels: Sequence[int], temb_dim: int):
        super().__init__()
        filters = list(filters)
        # skips arrive deepest-last from the encoder; the decoder walks them in reverse
        skips = list(reversed(skip_channels))
        self.blocks = nn.ModuleList()
        self.ups = nn.ModuleList()
        for i, f in enumerate(filters):
            self.blocks.append(ResBlock(f, f))
            if i < len(filters) - 1:
                self.ups.append(Up(f, skips[i], filters[i + 1], temb_dim))

    def forward(self, x, skips, temb):
        skips = list(reversed(skips))
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i < len(self.ups):
                x = self.ups[i](x, skips[i], temb)
        return x


@dataclass
class DecoderOutputs:
    x_hsi_dec: torch.Tensor
    x_lid_dec: torch.Tensor
    f_fus_de: torch.Tensor
    n_hsi_pred: torch.Tensor
    n_lid_pred: torch.Tensor


class Decoder(nn.Module):
    """Splits the fused map into two branches, decodes each, emits features and noise."""

    def __init__(
        self,
        fused_ch: int,
        filters: Sequence[int],
        skip_channels: Sequence[int],
        out_channels: int,
        hsi_bands: int,
        temb_dim: int,
        separate: bool = False,
    ):
        super().__init__()
        filters = list(filters)
        self.separate = separate
        in_ch = fused_ch // 2 if separate else fused_ch
        self.to_hsi = nn.Conv2d(in_ch, filters[0], 1)
        self.to_lid = nn.Conv2d(in_ch, filters[0], 1)
        self.branch_hsi = DecoderBranch(filters, skip_channels, temb_dim)
        self.branch_lid = DecoderBranch(filters, skip_channels, temb_dim)
        self.out_hsi = nn.Conv2d(filters[-1], out_channels, 3, 1, 1)
        self.out_lid = nn.Conv2d(filters[-1], out_channels, 3, 1, 1)
        self.noise_hsi = nn.Conv2d(filters[-1], hsi_bands, 3, 1, 1)
        self.noise_lid = nn.Conv2d(filters[-1], 1, 3, 1, 1)

    def forward(self, fused, skips_hsi, skips_lid, temb) -> DecoderOutputs:
        if self.separate:
            half = fused.shape[1] // 2
            h, l = self.to_hsi(fused[:, :half]), self.to_lid(fused[:, half:])
        else:
            h, l = self.to_hsi(fused), self.to_lid(fused)
        deepest = skips_hsi[-1].shape[-2:]
        if fused.shape[-2] > deepest[0] or fused.shape[-1] > deepest[1]:
            raise ConfigError("decoder", "bottleneck larger than the deepest skip map")
        x_hsi = self.branch_hsi(h, skips_hsi, temb)
        x_lid = self.branch_lid(l, skips_lid, temb)
        return DecoderOutputs(
            x_hsi_dec=x_hsi,
            x_lid_dec=x_lid,
            f_fus_de=torch.cat([self.out_hsi(x_hsi), self.out_lid(x_lid)], dim=1),
            n_hsi_pred=self.noise_hsi(x_hsi),
            n_lid_pred=self.noise_lid(x_lid),
        )


@dataclass
class EncoderTrace:
    skips_hsi: list
    skips_lid: list
    x_hsi_enc: torch.Tensor
    x_lid_enc: torch.Tensor
    masks: tuple | None
    fused: torch.Tensor


class FusionUNet(nn.Module):
    """Two-branch denoising U-Net that fuses HSI and LiDAR at the bottleneck."""

    def __init__(
        self,
        hsi_bands: int,
        enc_filters: Sequence[int] = (32, 64, 64),
        dec_filters: Sequence[int] = (64, 32, 32),
        dec_out_channels: int = 48,
        temb_dim: int = 128,
        fusion_strategy: str = "rdaf",
    ):
        super().__init__()
        enc_filters, dec_filters = list(enc_filters), list(dec_filters)
        if len(enc_filters) != len(dec_filters):
            raise ConfigError("dec_filters", "encoder and decoder need the same number of levels")
        self.temb_dim = temb_dim
        self.enc_hsi = Encoder(hsi_bands, enc_filters, temb_dim)
        self.enc_lid = Encoder(1, enc_filters, temb_dim)
        bottleneck = enc_filters[-1]
        self.fusion = make_fusion(fusion_strategy, bottleneck, 2 * bottleneck)
        self.decoder = Decoder(
            2 * bottleneck, dec_filters, enc_filters[:-1], dec_out_channels, hsi_bands, temb_dim,
            separate=self.fusion.separate,
        )

    def encode(self, x_hsi, x_lid, t) -> EncoderTrace:
        temb = timestep_embedding(t, self.temb_dim).to(x_hsi.dtype)
        bh, sh = self.enc_hsi(x_hsi, temb)
        bl, sl = self.enc_lid(x_lid, temb)
        fused, masks = self.fusion(bh, bl)
        return EncoderTrace(sh, sl, bh, bl, masks, fused)

    def forward(self, x_hsi, x_lid, t):
        trace = self.encode(x_hsi, x_lid, t)
        temb = timestep_embedding(t, self.temb_dim).to(x_hsi.dtype)
        out = self.decoder(trace.fused, trace.skips_hsi, trace.skips_lid, temb)
        return out, trace
