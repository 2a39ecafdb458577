"""End-to-end transmission of image frames.

A frame carries one image per user over one fading block. Two paths are
provided:

* :func:`train_forward` keeps every user's symbols on a fixed 8 x 64 slot
  grid, applies the selection and pruning masks at the receiver and
  delivers them error-free, so the whole analog path is differentiable.
* :func:`run_frames` is the evaluation pipeline: pilots, CSI and SNR
  estimation, selection and pruning, 64-QAM/LDPC protection of the pruning
  index matrix, packing, MIMO transmission, L-MMSE detection, index
  decoding, zero padding and reconstruction.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from . import channel as ch
from . import fec
from .codec import CodecConfig, SemanticDecoder, SemanticEncoder, from_paired, to_paired
from .entropy import entropy_2d_torch, normalize_entropy_torch, soft_entropy_2d
from .policy import (PRUNE_RATIOS, PruningPolicy, SelectionPolicy, expected_count, gumbel_onehot,
                     keep_masks, kept_length, prune_l1, pruned_count, thermometer, unprune)

IMG_SIDE = 32
CSI_MODES = ("perfect", "ls", "imperfect")


@dataclass
class SystemConfig:
    channels: int = 16
    width: int = 256
    antennas: int = 2          # M
    users: int = 2             # K
    heads: int = 4
    policy_hidden: int = 64
    attention: bool = True
    csi_feedback: bool = True
    entropy: bool = True       # entropy input to P1 and entropy loss term
    pruning: bool = True
    fixed_maps: int | None = None   # fixed-rate baseline: always send this many paired maps

    @property
    def rows(self) -> int:
        return self.channels // 2

    @property
    def row_len(self) -> int:
        return 2 * (IMG_SIDE // 4) ** 2

    def fingerprint(self) -> str:
        flags = [name for name, on in (("no-attention", not self.attention), ("no-csi", not self.csi_feedback),
                                       ("no-entropy", not self.entropy), ("no-pruning", not self.pruning)) if on]
        if self.fixed_maps is not None:
            flags.append(f"fixed-{self.fixed_maps}")
        return "+".join(flags) or "full"


class SemComSystem(nn.Module):
    """Shared semantic codec and rate policies for all users."""

    def __init__(self, cfg: SystemConfig = SystemConfig()):
        super().__init__()
        self.cfg = cfg
        codec_cfg = CodecConfig(cfg.channels, cfg.width, cfg.antennas, cfg.heads, cfg.attention, cfg.csi_feedback)
        self.encoder = SemanticEncoder(codec_cfg)
        self.decoder = SemanticDecoder(codec_cfg, IMG_SIDE // 4)
        self.p1 = SelectionPolicy(cfg.channels, cfg.antennas, cfg.policy_hidden)
        self.p2 = PruningPolicy(cfg.channels, cfg.antennas, cfg.policy_hidden)

    def groups(self) -> dict[str, nn.Module]:
        return {"CEM": self.encoder.cem, "CAEM": self.encoder.caem, "CADM": self.decoder.cadm,
                "CDM": self.decoder.cdm, "P1": self.p1, "P2": self.p2}

    def entropies(self, z0):
        raw = entropy_2d_torch(z0)
        if not self.cfg.entropy:
            return raw, torch.full_like(raw, 1.0 / raw.shape[-1])
        return raw, normalize_entropy_torch(raw)

    def selection_probs(self, z0, csi, snr):
        _, h_norm = self.entropies(z0)
        return self.p1(z0.flatten(-2), h_norm, csi, snr)

    def autoencode(self, x, csi, snr):
        """Channel-free reference: encode, power-normalize all maps, decode."""
        z0 = self.encoder(x, csi, snr)
        p = to_paired(z0)
        p = p * power_scale(p, p[..., 0, 0].new_full(p.shape[:-2], p.shape[-2] * p.shape[-1]))[..., None, None]
        return self.decoder(from_paired(p, z0.shape[-2:]), csi, snr)


# -- small symbol utilities ---------------------------------------------------

def complexify(row):
    """L reals -> L/2 complex symbols: first half real, second half imaginary."""
    n = row.shape[-1]
    if n % 2:
        raise ValueError("row length must be even")
    if isinstance(row, torch.Tensor):
        return torch.complex(row[..., : n // 2], row[..., n // 2:])
    row = np.asarray(row)
    return row[..., : n // 2] + 1j * row[..., n // 2:]


def decomplexify(sym):
    if isinstance(sym, torch.Tensor):
        return torch.cat([sym.real, sym.imag], dim=-1)
    sym = np.asarray(sym)
    return np.concatenate([sym.real, sym.imag], axis=-1)


def power_scale(real_payload, n_real):
    """Factor making the average complex-symbol power one, given the number of
    transmitted reals. Zero payloads get factor 0."""
    energy = (real_payload ** 2).flatten(-2).sum(-1) if isinstance(real_payload, torch.Tensor) \
        else np.sum(np.asarray(real_payload) ** 2)
    n_sym = n_real / 2
    if isinstance(energy, torch.Tensor):
        n_sym = torch.as_tensor(n_sym, dtype=energy.dtype)
        return torch.where(energy > 0, torch.sqrt(n_sym / energy.clamp_min(1e-30)), torch.zeros_like(energy))
    return math.sqrt(n_sym / energy) if energy > 0 else 0.0


def power_normalize(payload: np.ndarray) -> tuple[np.ndarray, bool]:
    """Scale complex symbols to unit average power. Returns (symbols,
    degenerate) where degenerate flags an all-zero payload."""
    payload = np.asarray(payload, dtype=complex)
    energy = np.sum(np.abs(payload) ** 2)
    if payload.size == 0 or energy == 0:
        return np.zeros_like(payload), True
    return payload * math.sqrt(payload.size / energy), False


def zero_pad_features(rows_hat, selection: np.ndarray, prune_mask: np.ndarray, channels: int = 16,
                      hw: tuple[int, int] = (8, 8)) -> np.ndarray:
    """Scatter received rows back to the C x H_f x W_f feature tensor.

    ``rows_hat`` holds the Ĉ packed real rows, ``selection`` the thermometer
    mask over C/2 paired rows, ``prune_mask`` the Ĉ x 2L index matrix.
    """
    selection = np.asarray(selection).astype(bool)
    L = hw[0] * hw[1]
    paired = np.zeros((channels // 2, 2 * L))
    n_sel = int(selection.sum())
    if n_sel:
        prune_mask = np.asarray(prune_mask)
        if prune_mask.shape != (n_sel, 2 * L):
            raise ValueError("index matrix does not match the selection mask")
        paired[selection] = unprune(np.asarray(rows_hat, dtype=float).reshape(n_sel, -1), prune_mask)
    z = np.concatenate([paired[:, :L], paired[:, L:]], axis=0)
    return z.reshape(channels, *hw)


def cpp_user(c_hat, l_hat, l_prime, height: int = IMG_SIDE, width: int = IMG_SIDE):
    return c_hat * (l_hat + l_prime) / (2 * height * width)


def index_overhead(ratio: float, row_len: int) -> int:
    return fec.index_symbols_per_row(row_len) if ratio > 0 else 0


def rate_lengths(cfg: SystemConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Per ratio class: kept length L̂ and (L̂ + L') / 2L."""
    n = cfg.row_len
    lh = torch.tensor([kept_length(a, n, even=True) for a in PRUNE_RATIOS], dtype=torch.float64)
    lp = torch.tensor([index_overhead(a, n) for a in PRUNE_RATIOS], dtype=torch.float64)
    return lh, (lh + lp) / n


# -- channel side helpers ------------------------------------------------------

class Streams:
    """Named random streams so that, e.g., switching the CSI mode leaves the
    channel and noise draws untouched."""

    NAMES = ("channel", "noise", "csi", "policy")

    def __init__(self, seed: int = 0):
        self.seed = seed
        for i, name in enumerate(self.NAMES):
            setattr(self, name, torch.Generator().manual_seed(seed * 7919 + 104729 * (i + 1)))

    def get_state(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name).get_state() for name in self.NAMES}

    def set_state(self, state):
        for name in self.NAMES:
            getattr(self, name).set_state(torch.as_tensor(state[name], dtype=torch.uint8))


def _complex_dtype(module: nn.Module):
    return torch.complex128 if next(module.parameters()).dtype == torch.float64 else torch.complex64


def _csi(cfg: SystemConfig, H_hat, snr_db, real_dtype):
    """Per-user features flattened to (F*K, 2M) and (F*K,)."""
    csi, _ = ch.csi_features(H_hat, 1.0)
    snr = torch.as_tensor(snr_db, dtype=torch.float64).reshape(-1, 1).expand(-1, cfg.users) / 25
    return csi.reshape(-1, csi.shape[-1]).to(real_dtype), snr.reshape(-1).to(real_dtype)


def acquire_csi(H, noise_var, snr_db, mode: str, generator=None):
    """Receiver-side channel knowledge: (H_hat, estimate error variance,
    SNR in dB used as network input)."""
    if mode not in CSI_MODES:
        raise ValueError(f"csi mode must be one of {CSI_MODES}")
    snr_db = torch.as_tensor(snr_db, dtype=torch.float64).expand(H.shape[:-2])
    zero = torch.zeros(H.shape[:-2], dtype=torch.float64)
    if mode == "perfect":
        return H, zero, snr_db
    M, K = H.shape[-2:]
    P = ch.make_pilots(K, ch.pilot_length(IMG_SIDE * IMG_SIDE // 2, K), H.dtype)
    if mode == "imperfect":
        est = ch.perturb_csi(H, P.transpose(-1, -2), 10 ** (snr_db / 10), generator)
        return est.H_hat, est.err_var.to(torch.float64), snr_db
    Yp = ch.send_pilots(H, P, noise_var, generator)
    H_hat = ch.ls_estimate(Yp, P)
    snr_hat = ch.estimate_snr(H_hat, P, noise_var)
    err = noise_var.to(torch.float64) / P.shape[-1]
    return H_hat, err, 10 * torch.log10(snr_hat.to(torch.float64).clamp_min(1e-12))


# -- differentiable training frame -------------------------------------------

@dataclass
class TrainOutputs:
    x_hat: torch.Tensor          # (F, K, 3, 32, 32)
    soft_count: torch.Tensor     # (F*K,) relaxed number of selected rows
    soft_len_ratio: torch.Tensor  # (F*K,) relaxed (L̂ + L') / 2L
    soft_entropy: torch.Tensor   # (F*K, C) differentiable 2D entropies
    raw_entropy: torch.Tensor    # (F*K, C) hard 2D entropies
    count: torch.Tensor          # (F*K,) hard Ĉ
    ratio_idx: torch.Tensor      # (F*K,)
    cpp: torch.Tensor            # (F*K,)
    soft1: torch.Tensor = None
    soft2: torch.Tensor = None


def train_forward(system: SemComSystem, x, snr_db, tau: float, streams: Streams | None = None,
                  csi_mode: str = "perfect",
                  noiseless: bool = False, force_ratio: int | None = None, force_maps: int | None = None,
                  surrogate: bool = True, random_policy: bool = False) -> TrainOutputs:
    """One batch of frames with error-free side information.

    ``x`` is (F, K, 3, 32, 32), ``snr_db`` (F,). Every frame gets its own
    channel draw. ``force_ratio`` is an index into the ratio table and
    ``force_maps`` a fixed number of selected rows. ``random_policy`` replaces
    both policies by uniform draws (1..C/2 rows, any ratio) for codec warm-up.
    """
    cfg = system.cfg
    F_, K = x.shape[:2]
    if K != cfg.users:
        raise ValueError(f"expected {cfg.users} users per frame, got {K}")
    rdt = next(system.parameters()).dtype
    cdt = _complex_dtype(system)
    snr_db = torch.as_tensor(snr_db, dtype=torch.float64).reshape(F_)
    streams = streams or Streams()
    H = ch.sample_channel(cfg.antennas, K, streams.channel, (F_,), cdt)
    nv = torch.zeros(F_, dtype=torch.float64) if noiseless else ch.noise_var_for_snr(H, snr_db).to(torch.float64)
    H_hat, err_var, snr_in = acquire_csi(H, nv, snr_db, csi_mode, streams.csi)
    csi, snr = _csi(cfg, H_hat, snr_in, rdt)

    xb = x.reshape(F_ * K, *x.shape[2:])
    z0 = system.encoder(xb, csi, snr)
    raw, h_norm = system.entropies(z0)
    soft_h = soft_entropy_2d(z0) if surrogate else raw
    rows, n = cfg.rows, cfg.row_len

    maps = force_maps if force_maps is not None else cfg.fixed_maps
    if maps is None and random_policy:
        onehot1 = torch.nn.functional.one_hot(
            torch.randint(0, rows, (F_ * K,), generator=streams.policy), rows + 1).to(rdt)
        soft1 = onehot1
        soft_count = onehot1[..., :-1].cumsum(-1).sum(-1)
    elif maps is None:
        probs1 = system.p1(z0.flatten(-2), h_norm, csi, snr)
        onehot1, soft1 = gumbel_onehot(probs1, tau, streams.policy)
        soft_count = expected_count(soft1)
    else:
        onehot1 = torch.zeros(F_ * K, rows + 1, dtype=rdt)
        onehot1[:, rows - maps] = 1
        soft1 = onehot1
        soft_count = torch.full((F_ * K,), float(maps), dtype=rdt)
    sel = thermometer(onehot1)                       # (B, rows), straight-through
    paired = to_paired(z0)
    z1 = paired * sel[..., None]

    lh, len_ratio = rate_lengths(cfg)
    if force_ratio is not None or not cfg.pruning:
        onehot2 = torch.zeros(F_ * K, len(PRUNE_RATIOS), dtype=rdt)
        onehot2[:, force_ratio or 0] = 1
        soft2 = onehot2
    elif random_policy:
        onehot2 = torch.nn.functional.one_hot(
            torch.randint(0, len(PRUNE_RATIOS), (F_ * K,), generator=streams.policy), len(PRUNE_RATIOS)).to(rdt)
        soft2 = onehot2
    else:
        probs2 = system.p2(z1, csi, snr)
        onehot2, soft2 = gumbel_onehot(probs2, tau, streams.policy)
    keep = torch.einsum("bt,tbrl->brl", onehot2, keep_masks(z1, even=True))
    soft_len = soft2 @ len_ratio.to(rdt)

    count = sel.detach().sum(-1)
    ridx = onehot2.detach().argmax(-1)
    n_real = count * lh.to(rdt)[ridx]
    # the scale sees the masks as constants: in the discrete system a larger
    # selection adds symbols as well as energy, so it does not dim the others
    scale = power_scale(paired * (sel.detach()[..., None] * keep.detach()), n_real)
    scale = torch.where(n_real > 0, scale, power_scale(paired.detach(), torch.full_like(n_real, rows * n)))

    # slot grid: row r, position j carries row r entries j and j + n/2. Every
    # slot is filled and the masks act at the receiver, so the straight-through
    # gradient of a dropped row or entry sees what it would have delivered
    # rather than noise alone.
    s = complexify(paired * scale[..., None, None]).reshape(F_, K, rows * n // 2).to(cdt)
    Y = ch.transmit(s.transpose(-1, -2), H, nv, streams.noise)
    W = ch.lmmse_filter(H_hat, nv)
    g = torch.diagonal(W @ H_hat, dim1=-2, dim2=-1)
    s_hat = (W @ Y) / g.unsqueeze(-1)
    z2_hat = decomplexify(s_hat.reshape(F_ * K, rows, n // 2)).to(rdt) * (keep * sel[..., None])
    z0_hat = from_paired(z2_hat, z0.shape[-2:])
    x_hat = system.decoder(z0_hat, csi, snr).reshape(x.shape)

    cpp = cpp_user(count, lh.to(rdt)[ridx], torch.where(ridx > 0, float(fec.index_symbols_per_row(n)), 0.0))
    return TrainOutputs(x_hat, soft_count, soft_len, soft_h, raw, count, ridx, cpp, soft1, soft2)


# -- evaluation frame ------------------------------------------------------------

@dataclass
class RateReport:
    frame: int
    user: int
    snr_db: float
    snr_hat_db: float
    c_hat: int
    ratio: float
    l_hat: int
    l_prime: int
    length_ratio: float
    cpp: float
    psnr: float
    symbols: int                # complex symbols physically sent (payload + index)
    degraded: bool = False
    selection: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _psnr(x, x_hat):
    from .bench import psnr
    return psnr(x, x_hat)


@torch.no_grad()
def run_frames(system: SemComSystem, x, snr_db, streams: Streams | None = None, csi_mode: str = "perfect",
               policy: str = "sample", noiseless: bool = False, force_ratio: int | None = None,
               force_maps: int | None = None, frame_offset: int = 0):
    """Simulate F frames; ``x`` is (F, K, 3, 32, 32).

    Returns (x_hat, list of RateReport, one per user and frame).
    ``policy`` is "sample" (categorical draws) or "argmax".
    """
    cfg = system.cfg
    F_, K = x.shape[:2]
    rdt = next(system.parameters()).dtype
    cdt = _complex_dtype(system)
    rows, n = cfg.rows, cfg.row_len
    snr_db = torch.as_tensor(snr_db, dtype=torch.float64).expand(F_).clone()

    streams = streams or Streams()
    H = ch.sample_channel(cfg.antennas, K, streams.channel, (F_,), cdt)
    nv = torch.zeros(F_, dtype=torch.float64) if noiseless else ch.noise_var_for_snr(H, snr_db).to(torch.float64)
    H_hat, err_var, snr_in = acquire_csi(H, nv, snr_db, csi_mode, streams.csi)
    csi, snr = _csi(cfg, H_hat, snr_in, rdt)

    xb = x.reshape(F_ * K, *x.shape[2:])
    z0 = system.encoder(xb, csi, snr)
    _, h_norm = system.entropies(z0)

    def choose(probs):
        if policy == "argmax":
            return probs.argmax(-1)
        if policy != "sample":
            raise ValueError("policy must be 'sample' or 'argmax'")
        return torch.multinomial(probs.double(), 1, generator=streams.policy).squeeze(-1)

    maps = force_maps if force_maps is not None else cfg.fixed_maps
    if maps is None:
        hot1 = choose(system.p1(z0.flatten(-2), h_norm, csi, snr))
    else:
        hot1 = torch.full((F_ * K,), rows - maps)
    sel = thermometer(torch.nn.functional.one_hot(hot1, rows + 1).to(rdt)).numpy().astype(bool)
    paired = to_paired(z0)
    z1 = paired * torch.as_tensor(sel, dtype=rdt)[..., None]
    if force_ratio is not None or not cfg.pruning:
        hot2 = torch.full((F_ * K,), force_ratio or 0)
    else:
        hot2 = choose(system.p2(z1, csi, snr))

    paired_np = paired.double().numpy()
    users = []
    for b in range(F_ * K):
        a = PRUNE_RATIOS[int(hot2[b])]
        selected = paired_np[b][sel[b]]
        c_hat = len(selected)
        if c_hat == 0:
            a = 0.0
        packed, mask = prune_l1(selected.reshape(c_hat, n), a, even=True)
        payload, degenerate = power_normalize(complexify(packed).ravel())
        idx = fec.encode_index_matrix(mask)
        users.append(dict(ratio=a, c_hat=c_hat, l_hat=packed.shape[1], mask=mask, payload=payload,
                          index=idx, degenerate=degenerate))

    lengths = [[u["payload"].size + u["index"].symbols.size for u in users[f * K:(f + 1) * K]] for f in range(F_)]
    L_max = max(max(l) for l in lengths) or 1
    Z = np.zeros((F_, L_max, K), dtype=complex)
    for b, u in enumerate(users):
        f, k = divmod(b, K)
        seg = np.concatenate([u["payload"], u["index"].symbols.ravel()])
        Z[f, : seg.size, k] = seg
    Zt = torch.as_tensor(Z).to(cdt)
    Y = ch.transmit(Zt, H, nv, streams.noise)
    W = ch.lmmse_filter(H_hat, nv)
    g = torch.diagonal(W @ H_hat, dim1=-2, dim2=-1)
    _, inn = ch.post_detection_stats(W, H_hat, nv)
    inn = inn + err_var.unsqueeze(-1) * K * (W.abs() ** 2).sum(-1)
    post_nv = (inn / g.abs() ** 2).numpy()
    S_hat = ((W @ Y) / g.unsqueeze(-1)).to(torch.complex128).numpy()

    # index side channel: decode all pruned rows of the batch at once
    idx_rows, idx_nv, owners = [], [], []
    for b, u in enumerate(users):
        if u["index"].rows and u["index"].symbols.size:
            f, k = divmod(b, K)
            start = u["payload"].size
            seg = S_hat[f, k, start:start + u["index"].symbols.size].reshape(u["c_hat"], -1)
            idx_rows.append(seg)
            idx_nv.append(np.full((u["c_hat"], 1), max(post_nv[f, k], 1e-12)))
            owners.append(b)
    decoded = {}
    if idx_rows:
        bits, ok, post = fec.decode_index_matrix(np.concatenate(idx_rows), np.concatenate(idx_nv), n)
        pos = 0
        for b in owners:
            c = users[b]["c_hat"]
            decoded[b] = (bits[pos:pos + c], ok[pos:pos + c], post[pos:pos + c])
            pos += c

    z0_hat = np.zeros((F_ * K, cfg.channels, *z0.shape[-2:]))
    reports = []
    for b, u in enumerate(users):
        f, k = divmod(b, K)
        c, lh = u["c_hat"], u["l_hat"]
        degraded = bool(c) and u["degenerate"]
        if c:
            rx = decomplexify(S_hat[f, k, : u["payload"].size].reshape(c, lh // 2))
            mask = u["mask"]
            if b in decoded:
                mask, degraded_rows = _recover_mask(*decoded[b], pruned_count(u["ratio"], n, even=True))
                degraded = degraded or degraded_rows
            z0_hat[b] = zero_pad_features(rx, sel[b], mask, cfg.channels, tuple(z0.shape[-2:]))
        lp = index_overhead(u["ratio"], n) if c else 0
        reports.append(RateReport(
            frame=frame_offset + f, user=k, snr_db=float(snr_db[f]), snr_hat_db=float(snr_in[f]),
            c_hat=c, ratio=u["ratio"], l_hat=lh if c else 0, l_prime=lp,
            length_ratio=(lh / n) if c else 0.0, cpp=cpp_user(c, lh, lp) if c else 0.0,
            psnr=0.0, symbols=u["payload"].size + u["index"].symbols.size, degraded=bool(degraded),
            selection=sel[b].astype(int).tolist()))

    z0_hat_t = torch.as_tensor(z0_hat, dtype=rdt)
    x_hat = system.decoder(z0_hat_t, csi, snr).reshape(x.shape)
    for b, r in enumerate(reports):
        f, k = divmod(b, K)
        r.psnr = _psnr(x[f, k].double().numpy(), x_hat[f, k].double().numpy())
    return x_hat, reports


def _recover_mask(bits, ok, post, n_prune):
    """Force every decoded row to carry exactly ``n_prune`` ones, the count
    implied by the (error-free) ratio; rows that needed fixing mark the
    frame degraded."""
    bits = bits.copy()
    degraded = bool((~ok).any())
    for r in range(len(bits)):
        if bits[r].sum() != n_prune:
            degraded = True
            order = np.argsort(post[r], kind="stable")[:n_prune]
            bits[r] = 0
            bits[r, order] = 1
    return bits, degraded


def write_traces(reports, stream):
    for r in reports:
        stream.write(r.to_json() + "\n")


def read_traces(stream) -> list[dict]:
    return [json.loads(line) for line in stream if line.strip()]
