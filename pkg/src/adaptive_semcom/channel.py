"""Multi-user MIMO Rayleigh block-fading uplink.

K single-antenna users, an M-antenna receiver. All functions work on torch
complex tensors and accept arbitrary leading batch dimensions so that a
whole training batch of independent frames can be simulated at once.
Shapes follow the received-signal convention ``Y = H Z^T + N``:

    H : (..., M, K)
    Z : (..., L, K)     one column per user
    Y : (..., M, L)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch


class SingularChannelError(RuntimeError):
    pass


@dataclass
class ChannelState:
    H: torch.Tensor
    noise_var: torch.Tensor  # broadcastable to H.shape[:-2]
    block_id: int = 0

    @property
    def M(self) -> int:
        return self.H.shape[-2]

    @property
    def K(self) -> int:
        return self.H.shape[-1]


@dataclass
class CsiEstimate:
    H_hat: torch.Tensor
    err_var: torch.Tensor
    snr_hat: torch.Tensor  # linear


def complex_normal(shape, var=1.0, generator=None, dtype=torch.complex64) -> torch.Tensor:
    real_dtype = torch.float64 if dtype == torch.complex128 else torch.float32
    re = torch.randn(shape, generator=generator, dtype=real_dtype)
    im = torch.randn(shape, generator=generator, dtype=real_dtype)
    scale = torch.sqrt(torch.as_tensor(var, dtype=real_dtype) / 2)
    if scale.ndim:
        scale = scale.reshape(scale.shape + (1,) * (len(shape) - scale.ndim))
    return torch.complex(re * scale, im * scale)


def sample_channel(M: int, K: int, generator=None, batch_shape=(), dtype=torch.complex64) -> torch.Tensor:
    """i.i.d. CN(0, 1) channel matrix of shape ``(*batch_shape, M, K)``."""
    if M < 1 or K < 1:
        raise ValueError("M and K must be positive")
    return complex_normal((*batch_shape, M, K), 1.0, generator, dtype)


def noise_var_for_snr(H: torch.Tensor, snr_db) -> torch.Tensor:
    """Noise variance that makes the per-frame SNR of a unit-power signal
    equal to ``snr_db``; with unit-power columns of Z the SNR reduces to
    ||H||_F^2 / (K M sigma^2)."""
    M, K = H.shape[-2:]
    gain = (H.abs() ** 2).sum(dim=(-2, -1)) / (K * M)
    snr = 10 ** (torch.as_tensor(snr_db, dtype=gain.dtype) / 10)
    return gain / snr


def transmit(Z: torch.Tensor, H: torch.Tensor, noise_var, generator=None, noise=None) -> torch.Tensor:
    """Y = H Z^T + N with N ~ CN(0, noise_var). Pass ``noise`` to reuse a
    realization."""
    if Z.shape[-1] != H.shape[-1]:
        raise ValueError(f"Z has {Z.shape[-1]} user columns but H has {H.shape[-1]}")
    Y = H @ Z.transpose(-1, -2)
    if noise is None:
        nv = torch.as_tensor(noise_var, dtype=Y.real.dtype)
        if torch.all(nv == 0):
            return Y
        noise = complex_normal(Y.shape, nv, generator, Y.dtype)
    return Y + noise


def _per_user_snr_terms(H: torch.Tensor, S: torch.Tensor) -> torch.Tensor:
    """||h_k s_k^T||^2 / ||h_k s_k^T||_0 for each user; S is (..., L, K)."""
    outer = H.unsqueeze(-1) * S.transpose(-1, -2).unsqueeze(-3)  # (..., M, K, L)
    energy = (outer.abs() ** 2).sum(dim=(-3, -1))
    count = (outer != 0).sum(dim=(-3, -1)).to(energy.dtype)
    if torch.any(count == 0):
        raise ValueError("all-zero user signal")
    return energy / count


def true_snr(H: torch.Tensor, Z: torch.Tensor, noise_var) -> torch.Tensor:
    """Channel SNR of the transmitted frame (linear), averaged over users.
    Returns +inf when the noise variance is zero."""
    terms = _per_user_snr_terms(H, Z).mean(dim=-1)
    nv = torch.as_tensor(noise_var, dtype=terms.dtype)
    return torch.where(nv == 0, torch.full_like(terms, math.inf), terms / torch.where(nv == 0, 1, nv))


def pilot_length(payload_symbols: int, K: int = 1) -> int:
    return max(math.ceil(payload_symbols / 16), K)


def make_pilots(K: int, length: int, dtype=torch.complex64) -> torch.Tensor:
    """K x length pilot matrix: rows of a DFT matrix, unit-modulus symbols,
    mutually orthogonal rows."""
    if length < K:
        raise ValueError("pilot length must be at least K")
    k = torch.arange(K, dtype=torch.float64)[:, None]
    n = torch.arange(length, dtype=torch.float64)[None, :]
    P = torch.exp(-2j * math.pi * k * n / length)
    return P.to(dtype)


def send_pilots(H: torch.Tensor, P: torch.Tensor, noise_var, generator=None) -> torch.Tensor:
    """Received pilot block ``H P + N``."""
    return transmit(P.transpose(-1, -2).to(H.dtype), H, noise_var, generator)


def ls_estimate(Y_pilot: torch.Tensor, P: torch.Tensor) -> torch.Tensor:
    """H_hat = Y P^H (P P^H)^-1."""
    P = P.to(Y_pilot.dtype)
    gram = P @ P.conj().transpose(-1, -2)
    if torch.linalg.matrix_rank(gram) < gram.shape[-1]:
        raise SingularChannelError("pilot matrix is rank deficient")
    rhs = (Y_pilot @ P.conj().transpose(-1, -2)).transpose(-1, -2)
    # solve gram^T X^T = rhs^T  <=>  X gram = Y P^H
    return torch.linalg.solve(gram.transpose(-1, -2), rhs).transpose(-1, -2)


def estimate_snr(H_hat: torch.Tensor, P: torch.Tensor, noise_var) -> torch.Tensor:
    """SNR estimate from the estimated channel and the pilot block."""
    if torch.all(P == 0):
        raise ValueError("zero pilot")
    return true_snr(H_hat, P.transpose(-1, -2).to(H_hat.dtype), noise_var)


def perturb_csi(H: torch.Tensor, Z: torch.Tensor, snr_linear, generator=None) -> CsiEstimate:
    """Imperfect CSI model: H_hat = H + dH, dH ~ CN(0, err_var), where
    err_var = sum_k ||h_k z_k^T||^2 / (K * SNR * ||h_k z_k^T||_0)."""
    snr = torch.as_tensor(snr_linear, dtype=H.real.dtype)
    err_var = _per_user_snr_terms(H, Z).mean(dim=-1) / snr
    err_var = torch.where(torch.isinf(snr), torch.zeros_like(err_var), err_var)
    dH = complex_normal(H.shape, err_var, generator, H.dtype)
    return CsiEstimate(H + dH, err_var, snr)


def lmmse_filter(H_hat: torch.Tensor, noise_var) -> torch.Tensor:
    """W = H^H (H H^H + s I_M)^-1, evaluated as (H^H H + s I_K)^-1 H^H when
    K <= M (same matrix, better conditioned as s -> 0)."""
    M, K = H_hat.shape[-2:]
    nv = torch.as_tensor(noise_var, dtype=H_hat.real.dtype)
    nv = nv.reshape(nv.shape + (1, 1)) if nv.ndim else nv
    Hh = H_hat.conj().transpose(-1, -2)
    try:
        if K <= M:
            A = Hh @ H_hat + nv * torch.eye(K, dtype=H_hat.dtype)
            return torch.linalg.solve(A, Hh)
        A = H_hat @ Hh + nv * torch.eye(M, dtype=H_hat.dtype)
        return Hh @ torch.linalg.inv(A)
    except torch.linalg.LinAlgError as exc:
        raise SingularChannelError(str(exc)) from exc


def lmmse_detect(Y: torch.Tensor, H_hat: torch.Tensor, noise_var) -> torch.Tensor:
    """Detected streams, shape (..., K, L)."""
    return lmmse_filter(H_hat, noise_var) @ Y


def post_detection_stats(W: torch.Tensor, H: torch.Tensor, noise_var) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-stream gain g_k = [W H]_kk and the interference-plus-noise variance
    seen after detection, assuming unit-power independent user symbols."""
    G = W @ H
    gain = torch.diagonal(G, dim1=-2, dim2=-1)
    cross = (G.abs() ** 2).sum(dim=-1) - gain.abs() ** 2
    nv = torch.as_tensor(noise_var, dtype=cross.dtype)
    nv = nv.unsqueeze(-1) if nv.ndim else nv
    noise = nv * (W.abs() ** 2).sum(dim=-1)
    return gain, cross + noise


def csi_features(H: torch.Tensor, snr_linear) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-user network inputs: ``[Re h_k; Im h_k]`` of shape (..., K, 2M) and
    the SNR in dB scaled by 1/25, shape (...,)."""
    h = H.transpose(-1, -2)
    csi = torch.cat([h.real, h.imag], dim=-1).float()
    snr = torch.as_tensor(snr_linear, dtype=torch.float64)
    snr_db = 10 * torch.log10(snr.clamp_min(1e-12))
    return csi, (snr_db / 25).float()
