"""Rate control: feature-map selection (P1), pruning-ratio choice (P2),
Gumbel-Softmax sampling, thermometer coding and magnitude pruning."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

PRUNE_RATIOS = (0.0, 0.2, 0.3, 0.4, 0.5)


class PolicyMLP(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, hidden: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, x):
        return torch.softmax(self.fc2(F.relu(self.fc1(x))), dim=-1)


class SelectionPolicy(nn.Module):
    """P1: probabilities over "first selected map" positions plus "none".

    Inputs are the C real maps ``z0`` (..., C, L), their normalized entropies
    (..., C), CSI features (..., 2M) and the scaled SNR (...,).
    """

    def __init__(self, channels: int = 16, antennas: int = 2, hidden: int = 64):
        super().__init__()
        self.channels = channels
        self.mlp = PolicyMLP(channels + 2 * antennas + 1, channels // 2 + 1, hidden)

    def forward(self, z0, h_norm, csi, snr):
        info = torch.cat([z0.flatten(-2) if z0.dim() > h_norm.dim() + 1 else z0,
                          h_norm.unsqueeze(-1)], dim=-1)
        pooled = info.mean(-1)
        return self.mlp(torch.cat([pooled, snr.unsqueeze(-1), csi], dim=-1))


class PruningPolicy(nn.Module):
    """P2: probabilities over the pruning-ratio table.

    ``z1`` holds the C/2 paired rows with unselected rows zeroed, so the
    row-pooled vector is the selected rows' pools zero-padded in place.
    """

    def __init__(self, channels: int = 16, antennas: int = 2, hidden: int = 64):
        super().__init__()
        self.mlp = PolicyMLP(channels // 2 + 2 * antennas + 1, len(PRUNE_RATIOS), hidden)

    def forward(self, z1, csi, snr):
        pooled = z1.mean(-1)
        return self.mlp(torch.cat([pooled, snr.unsqueeze(-1), csi], dim=-1))


def sample_gumbel(shape, generator=None, dtype=torch.float32):
    u = torch.rand(shape, generator=generator, dtype=dtype)
    tiny = torch.finfo(dtype).tiny
    return -torch.log((-torch.log(u.clamp_min(tiny))).clamp_min(tiny))


def relaxed(probs, gumbel, tau):
    return torch.softmax((torch.log(probs.clamp_min(1e-30)) + gumbel) / tau, dim=-1)


def gumbel_onehot(probs, tau, generator=None, gumbel=None):
    """Straight-through Gumbel-Softmax.

    Returns ``(onehot, soft)``: the forward value of ``onehot`` is the hard
    argmax sample while its gradient is that of ``soft``.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if gumbel is None:
        gumbel = sample_gumbel(probs.shape, generator, probs.dtype)
    soft = relaxed(probs, gumbel, tau)
    hard = F.one_hot(soft.argmax(-1), soft.shape[-1]).to(soft.dtype)
    return hard - soft.detach() + soft, soft


def thermometer(onehot):
    """One-hot over C/2+1 positions -> selection mask over C/2 maps.

    A hot entry at position i sets positions i..C/2 to one; the trailing
    "none" position gives the all-zero mask. Works on numpy arrays and on
    (straight-through) torch tensors.
    """
    if isinstance(onehot, torch.Tensor):
        return torch.cumsum(onehot[..., :-1], dim=-1)
    onehot = np.asarray(onehot)
    if onehot.ndim != 1 or set(np.unique(onehot)) - {0, 1} or onehot.sum() != 1:
        raise ValueError("thermometer input must be a single one-hot vector")
    return np.cumsum(onehot[:-1]).astype(np.int64)


def expected_count(soft):
    """Relaxed number of selected maps, sum of cumulated probabilities."""
    return torch.cumsum(soft[..., :-1], dim=-1).sum(-1)


def select_maps(paired: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask).astype(bool)
    return np.asarray(paired)[mask]


def pruned_count(ratio: float, row_len: int, even: bool = False) -> int:
    """Entries removed per row: floor(ratio * row_len), plus one when ``even``
    and the survivor count would be odd."""
    n = math.floor(ratio * row_len + 1e-9)
    if even and (row_len - n) % 2:
        n += 1
    return n


def kept_length(ratio: float, row_len: int, even: bool = False) -> int:
    return row_len - pruned_count(ratio, row_len, even)


def prune_order(rows) -> np.ndarray:
    """Per-row pruning priority: ascending |value|, lower index first on ties."""
    return np.argsort(np.abs(np.asarray(rows)), axis=-1, kind="stable")


def prune_l1(z1: np.ndarray, ratio: float, even: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Remove the smallest-magnitude entries of every row.

    Returns the packed survivors (rows, L_hat) in original order and the
    index matrix with 1 marking pruned positions.
    """
    z1 = np.asarray(z1)
    rows, width = z1.shape
    n = pruned_count(ratio, width, even)
    mask = np.zeros((rows, width), dtype=np.uint8)
    if n:
        order = prune_order(z1)[:, :n]
        np.put_along_axis(mask, order, 1, axis=1)
    kept = z1[mask == 0].reshape(rows, width - n)
    return kept, mask


def unprune(packed: np.ndarray, mask: np.ndarray) -> np.ndarray:
    packed = np.asarray(packed)
    mask = np.asarray(mask)
    if packed.shape[0] != mask.shape[0]:
        raise ValueError("row count mismatch between payload and index matrix")
    keep = mask == 0
    lengths = keep.sum(axis=1)
    if packed.size and np.any(lengths != packed.shape[1]):
        raise ValueError("index matrix inconsistent with payload length")
    out = np.zeros(mask.shape, dtype=packed.dtype if packed.size else float)
    out[keep] = packed.ravel()
    return out


def keep_masks(z1: torch.Tensor, even: bool = True) -> torch.Tensor:
    """Keep-masks for every ratio in the table: (T, ..., width), 1 = kept."""
    width = z1.shape[-1]
    rank = torch.argsort(torch.argsort(z1.detach().abs(), dim=-1, stable=True), dim=-1)
    masks = [(rank >= pruned_count(a, width, even)).to(z1.dtype) for a in PRUNE_RATIOS]
    return torch.stack(masks)
