"""Two-dimensional entropy of feature maps.

Each map is quantized to 256 gray levels; every pixel contributes the pair
(gray value, rounded mean gray of its 3x3 neighbourhood) and the entropy of
the empirical pair distribution is measured in bits.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

LEVELS = 256


def _round_half_up(x):
    return np.floor(x + 0.5)


def gray_quantize(fmap: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 255] and round; a constant map becomes 128."""
    fmap = np.asarray(fmap, dtype=np.float64)
    if np.isnan(fmap).any():
        raise ValueError("feature map contains NaN")
    lo, hi = fmap.min(), fmap.max()
    if hi == lo:
        return np.full(fmap.shape, LEVELS // 2, dtype=np.int64)
    return _round_half_up((fmap - lo) * ((LEVELS - 1) / (hi - lo))).astype(np.int64)


def neighbourhood_mean(gray: np.ndarray) -> np.ndarray:
    """Rounded mean over the 3x3 window, borders replicated."""
    g = np.pad(np.asarray(gray, dtype=np.float64), 1, mode="edge")
    h, w = gray.shape
    acc = sum(g[i:i + h, j:j + w] for i in range(3) for j in range(3))
    return _round_half_up(acc / 9.0).astype(np.int64)


def joint_histogram(gray: np.ndarray) -> dict[tuple[int, int], int]:
    """Counts q(m, n) of (gray value, neighbourhood mean) pairs."""
    gray = np.asarray(gray, dtype=np.int64)
    n = neighbourhood_mean(gray)
    codes, counts = np.unique(gray.ravel() * LEVELS + n.ravel(), return_counts=True)
    return {(int(c) // LEVELS, int(c) % LEVELS): int(k) for c, k in zip(codes, counts)}


def entropy_2d(gray: np.ndarray) -> float:
    gray = np.asarray(gray, dtype=np.int64)
    counts = np.array(list(joint_histogram(gray).values()))
    p = counts / gray.size
    return float(-(p * np.log2(p)).sum())


def map_entropy(fmap: np.ndarray) -> float:
    return entropy_2d(gray_quantize(fmap))


def normalize_entropy(raw) -> np.ndarray:
    """Softmax over the C raw entropies."""
    raw = np.asarray(raw, dtype=np.float64)
    e = np.exp(raw - raw.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# -- batched torch versions used inside the model ----------------------------

def _gray_levels(z: torch.Tensor) -> torch.Tensor:
    """Continuous gray level in [0, 255]; constant maps sit at 128."""
    lo = z.amin(dim=(-2, -1), keepdim=True)
    hi = z.amax(dim=(-2, -1), keepdim=True)
    span = hi - lo
    flat = span == 0
    g = (z - lo) * ((LEVELS - 1) / torch.where(flat, torch.ones_like(span), span))
    return torch.where(flat, torch.full_like(g, LEVELS // 2), g)


def _box3(g: torch.Tensor) -> torch.Tensor:
    shape = g.shape
    x = g.reshape(-1, 1, *shape[-2:])
    x = F.pad(x, (1, 1, 1, 1), mode="replicate")
    return F.avg_pool2d(x, 3, stride=1).reshape(shape)


@torch.no_grad()
def entropy_2d_torch(z: torch.Tensor) -> torch.Tensor:
    """Hard 2D entropy of every map in ``z`` of shape (..., H, W), in bits.

    Matches :func:`map_entropy` up to float rounding at exact .5 boundaries.
    """
    g = torch.floor(_gray_levels(z.double()) + 0.5)
    n = torch.floor(_box3(g) + 0.5)
    codes = (g * LEVELS + n).flatten(-2)
    same = codes.unsqueeze(-1) == codes.unsqueeze(-2)
    count = same.sum(-1).double()
    N = codes.shape[-1]
    return -(torch.log2(count / N)).mean(-1).to(z.dtype)


class _KernelPairEntropy(torch.autograd.Function):
    """-mean_i log2(c_i / N) with soft counts c_i = sum_j exp(-|p_i - p_j|^2 / 2s^2)
    over pixel pairs p = (g, n). Backward is written out to avoid keeping the
    N x N intermediates of autograd."""

    @staticmethod
    def _kernel(g, n, bw):
        d2 = (g.unsqueeze(-1) - g.unsqueeze(-2)) ** 2
        d2 += (n.unsqueeze(-1) - n.unsqueeze(-2)) ** 2
        # exponents below -60 only add < 1e-26 to counts >= 1; clamping keeps exp off the denormal path
        return torch.exp_(d2.mul_(-0.5 / bw ** 2).clamp_(min=-60.0))

    @staticmethod
    def forward(ctx, g, n, bw):
        K = _KernelPairEntropy._kernel(g, n, bw)
        count = K.sum(-1)
        ctx.save_for_backward(g, n, count)
        ctx.bw = bw
        N = g.shape[-1]
        return -(torch.log2(count / N)).mean(-1)

    @staticmethod
    def backward(ctx, grad):
        g, n, count = ctx.saved_tensors
        bw = ctx.bw
        N = g.shape[-1]
        w = -grad.unsqueeze(-1) / (N * math.log(2) * count)      # dH/dc_i
        A = _KernelPairEntropy._kernel(g, n, bw)
        A.mul_(w.unsqueeze(-1) + w.unsqueeze(-2))
        rows = A.sum(-1)
        scale = -1.0 / bw ** 2
        dg = scale * (g * rows - (A @ g.unsqueeze(-1)).squeeze(-1))
        dn = scale * (n * rows - (A @ n.unsqueeze(-1)).squeeze(-1))
        return dg, dn, None


def soft_entropy_2d(z: torch.Tensor, bandwidth: float = 1.0) -> torch.Tensor:
    """Differentiable surrogate of the 2D entropy.

    Pair counts are replaced by Gaussian-kernel soft counts over continuous
    gray levels (kernel width in gray levels), so gradients reach ``z``.
    """
    g = _gray_levels(z)
    n = _box3(g)
    return _KernelPairEntropy.apply(g.flatten(-2), n.flatten(-2), float(bandwidth))


def normalize_entropy_torch(raw: torch.Tensor) -> torch.Tensor:
    return torch.softmax(raw, dim=-1)
