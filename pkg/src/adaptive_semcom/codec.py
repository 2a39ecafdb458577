"""Semantic encoder and decoder.

Encoder: CNN encoding module (CEM) followed by the channel adaptive encoding
module (CAEM) with CSI-aware CBAM attention and channel-condition adaptation.
Decoder: channel adaptive decoding module (CADM) opening with multi-head
self-attention, then the CNN decoding module (CDM).

Every conditioned block takes ``csi`` (B, 2M) and ``snr`` (B,) tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class CodecConfig:
    channels: int = 16       # C, real feature maps at the encoder output
    width: int = 256         # CAEM / CADM channel count; CEM uses width/4, width/2, width
    antennas: int = 2        # M
    heads: int = 4
    attention: bool = True   # CBAM-CSI and MHSA; False replaces them by identities
    csi_feedback: bool = True


class ChannelAttention(nn.Module):
    """Shared two-layer 1x1 conv (a per-channel MLP) applied to avg- and
    max-pooled descriptors extended with CSI and SNR."""

    def __init__(self, channels: int, cond_dim: int, reduction: int = 16):
        super().__init__()
        hidden = max(channels // reduction, 4)
        self.fc1 = nn.Linear(channels + cond_dim, hidden, bias=False)
        self.fc2 = nn.Linear(hidden, channels, bias=False)

    def shared(self, x):
        return self.fc2(F.relu(self.fc1(x)))

    def attention_map(self, z, cond):
        avg = z.mean(dim=(-2, -1))
        mx = z.amax(dim=(-2, -1))
        return torch.sigmoid(self.shared(torch.cat([avg, cond], -1)) + self.shared(torch.cat([mx, cond], -1)))

    def forward(self, z, cond):
        return z * self.attention_map(z, cond)[..., None, None]


class SpatialAttention(nn.Module):
    def __init__(self, kernel: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel, padding=kernel // 2, bias=False)

    def attention_map(self, z):
        pooled = torch.cat([z.mean(1, keepdim=True), z.amax(1, keepdim=True)], 1)
        return torch.sigmoid(self.conv(pooled))

    def forward(self, z):
        return z * self.attention_map(z)


class CBAMCSI(nn.Module):
    def __init__(self, channels: int, cond_dim: int):
        super().__init__()
        self.channel = ChannelAttention(channels, cond_dim)
        self.spatial = SpatialAttention()

    def forward(self, z, cond):
        return self.spatial(self.channel(z, cond))


class ChannelConditionAdapter(nn.Module):
    """z' = z * scale + bias with per-channel scale and bias predicted from
    the pooled maps, CSI and SNR. Initialized to the identity."""

    def __init__(self, channels: int, cond_dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or max(channels // 4, 8)
        d = channels + cond_dim
        self.scale = nn.Sequential(nn.Linear(d, hidden), nn.ReLU(), nn.Linear(hidden, channels))
        self.bias = nn.Sequential(nn.Linear(d, hidden), nn.ReLU(), nn.Linear(hidden, channels))
        nn.init.zeros_(self.scale[2].weight)
        nn.init.ones_(self.scale[2].bias)
        nn.init.zeros_(self.bias[2].weight)
        nn.init.zeros_(self.bias[2].bias)

    def factors(self, z, cond):
        x = torch.cat([z.flatten(2).mean(-1), cond], -1)
        return self.scale(x), self.bias(x)

    def forward(self, z, cond):
        sf, bf = self.factors(z, cond)
        shape = sf.shape + (1,) * (z.dim() - 2)
        return z * sf.reshape(shape) + bf.reshape(shape)


class MultiHeadSelfAttention(nn.Module):
    """Heads run in parallel on the flattened maps (tokens = maps, features =
    spatial positions); head outputs are summed and a residual is added."""

    def __init__(self, tokens_dim: int, heads: int = 4):
        super().__init__()
        self.d = tokens_dim
        self.q = nn.ModuleList(nn.Linear(tokens_dim, tokens_dim, bias=False) for _ in range(heads))
        self.k = nn.ModuleList(nn.Linear(tokens_dim, tokens_dim, bias=False) for _ in range(heads))
        self.v = nn.ModuleList(nn.Linear(tokens_dim, tokens_dim, bias=False) for _ in range(heads))
        for lin in self.v:
            lin.weight.data.mul_(1.0 / heads)

    def attention_maps(self, x):
        return [torch.softmax(q(x) @ k(x).transpose(-1, -2) / self.d ** 0.5, dim=-1)
                for q, k in zip(self.q, self.k)]

    def forward(self, x):
        out = x
        for a, v in zip(self.attention_maps(x), self.v):
            out = out + a @ v(x)
        return out


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act1 = nn.PReLU()
        self.act2 = nn.PReLU()

    def forward(self, x):
        return self.act2(x + self.conv2(self.act1(self.conv1(x))))


class _Identity2(nn.Module):
    def forward(self, z, cond=None):
        return z


class SemanticEncoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        w = cfg.width
        cond = 2 * cfg.antennas + 1
        self.cfg = cfg
        self.cem = nn.Sequential(
            nn.Conv2d(3, w // 4, 7, stride=1, padding=3), nn.PReLU(),
            nn.Conv2d(w // 4, w // 2, 3, stride=2, padding=1), nn.PReLU(),
            nn.Conv2d(w // 2, w, 3, stride=2, padding=1), nn.PReLU(),
        )
        att = (lambda: CBAMCSI(w, cond)) if cfg.attention else _Identity2
        self.caem = nn.ModuleDict(dict(
            res1=ResBlock(w), att1=att(), cc1=ChannelConditionAdapter(w, cond),
            res2=ResBlock(w), att2=att(), cc2=ChannelConditionAdapter(w, cond),
            out=nn.Conv2d(w, cfg.channels, 3, padding=1),
        ))

    def forward(self, x, csi, snr):
        cond = _condition(csi, snr, self.cfg)
        z = self.cem(x)
        m = self.caem
        z = m["cc1"](m["att1"](m["res1"](z), cond), cond)
        z = m["cc2"](m["att2"](m["res2"](z), cond), cond)
        return m["out"](z)


class SemanticDecoder(nn.Module):
    def __init__(self, cfg: CodecConfig, feature_hw: int = 8):
        super().__init__()
        w = cfg.width
        cond = 2 * cfg.antennas + 1
        self.cfg = cfg
        L = feature_hw * feature_hw
        self.cadm = nn.ModuleDict(dict(
            mhsa=MultiHeadSelfAttention(L, cfg.heads) if cfg.attention else nn.Identity(),
            conv=nn.Conv2d(cfg.channels, w, 3, padding=1), act=nn.PReLU(),
            cc1=ChannelConditionAdapter(w, cond), res1=ResBlock(w),
            cc2=ChannelConditionAdapter(w, cond), res2=ResBlock(w),
        ))
        self.cdm = nn.Sequential(
            nn.ConvTranspose2d(w, w // 2, 3, stride=2, padding=1, output_padding=1), nn.PReLU(),
            nn.ConvTranspose2d(w // 2, w // 4, 3, stride=2, padding=1, output_padding=1), nn.PReLU(),
            nn.Conv2d(w // 4, 3, 5, padding=2), nn.Sigmoid(),
        )

    def forward(self, z, csi, snr):
        cond = _condition(csi, snr, self.cfg)
        m = self.cadm
        shape = z.shape
        z = m["mhsa"](z.flatten(-2)).reshape(shape)
        z = m["act"](m["conv"](z))
        z = m["res1"](m["cc1"](z, cond))
        z = m["res2"](m["cc2"](z, cond))
        return self.cdm(z)


def _condition(csi, snr, cfg: CodecConfig):
    cond = torch.cat([csi, snr.unsqueeze(-1)], -1)
    return cond if cfg.csi_feedback else torch.zeros_like(cond)


def to_paired(z: torch.Tensor) -> torch.Tensor:
    """(..., C, H, W) real maps -> (..., C/2, 2L): row i joins maps i and i+C/2."""
    C = z.shape[-3]
    flat = z.flatten(-2)
    return torch.cat([flat[..., : C // 2, :], flat[..., C // 2:, :]], -1)


def from_paired(p: torch.Tensor, hw: tuple[int, int] = (8, 8)) -> torch.Tensor:
    L = hw[0] * hw[1]
    z = torch.cat([p[..., :L], p[..., L:]], -2)
    return z.reshape(*z.shape[:-1], *hw)
