"""Digital side channel: LDPC codes, Gray-mapped square QAM and the
pruning-index frame codec.

The pruning index matrix is the only digitally coded part of a frame. Each
row (2L bits) is protected with a rate-3/4 LDPC code and carried on 64-QAM
symbols. The separated-coding baseline uses a rate-1/2 repeat-accumulate
code on 4-QAM.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

LLR_CLIP = 30.0


class FrameError(ValueError):
    """Raised when a payload and its side information disagree."""


# --------------------------------------------------------------------------
# LDPC codes
# --------------------------------------------------------------------------

def _peg_matrix(n: int, m: int, col_weight: int, rng: np.random.Generator) -> np.ndarray:
    """Progressive edge growth: place each edge on a check node that is as far
    as possible from the variable node being connected."""
    H = np.zeros((m, n), dtype=np.uint8)
    chk_deg = np.zeros(m, dtype=int)
    var_nbrs: list[list[int]] = [[] for _ in range(n)]
    chk_nbrs: list[list[int]] = [[] for _ in range(m)]
    all_checks = set(range(m))
    for j in range(n):
        for e in range(col_weight):
            if e == 0:
                cands = np.flatnonzero(chk_deg == chk_deg.min())
            else:
                seen_c = set(var_nbrs[j])
                frontier = set(seen_c)
                seen_v = {j}
                while True:
                    next_v = {v for c in frontier for v in chk_nbrs[c]} - seen_v
                    seen_v |= next_v
                    next_c = {c for v in next_v for c in var_nbrs[v]} - seen_c
                    if not next_c:
                        pool = all_checks - seen_c
                        break
                    if len(seen_c | next_c) == m:
                        pool = all_checks - seen_c
                        break
                    seen_c |= next_c
                    frontier = next_c
                cands = np.array(sorted(pool))
                cands = cands[chk_deg[cands] == chk_deg[cands].min()]
            c = int(rng.choice(cands))
            H[c, j] = 1
            chk_deg[c] += 1
            var_nbrs[j].append(c)
            chk_nbrs[c].append(j)
    return H


def _gf2_rref(H: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Reduced row echelon form over GF(2). Returns (rows, pivot columns)."""
    A = H.copy().astype(np.uint8)
    m, n = A.shape
    pivots = []
    row = 0
    # search pivots from the right so parity bits land at the tail when possible
    for col in range(n - 1, -1, -1):
        if row >= m:
            break
        hits = np.flatnonzero(A[row:, col]) + row
        if hits.size == 0:
            continue
        p = hits[0]
        if p != row:
            A[[row, p]] = A[[p, row]]
        others = np.flatnonzero(A[:, col])
        others = others[others != row]
        A[others] ^= A[row]
        pivots.append(col)
        row += 1
    return A[:row], pivots


@dataclass
class LDPCCode:
    """A binary LDPC code in systematic column order.

    Columns of ``H`` are permuted so that ``codeword = [info, parity]`` and
    ``H @ codeword = 0 (mod 2)``.
    """

    H: np.ndarray
    k: int
    name: str = "ldpc"
    seed: int | None = None
    osd_order: int = 0

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=np.uint8)
        m, n = self.H.shape
        rref, pivots = _gf2_rref(self.H)
        rank = len(pivots)
        if n - rank != self.k:
            raise ValueError(f"code dimension {n - rank} != declared k={self.k}")
        info_cols = [c for c in range(n) if c not in set(pivots)]
        perm = np.array(info_cols + pivots[::-1])
        self.perm = perm
        self.H = self.H[:, perm]
        rref = rref[:, perm]
        # rows of rref now read [A | I] up to row order; align rows to pivots
        parity_part = rref[:, self.k:]
        order = np.argmax(parity_part, axis=1)
        gen = np.zeros((rank, self.k), dtype=np.uint8)
        gen[order] = rref[:, : self.k]
        self._parity_gen = gen
        self._build_graph()

    @property
    def n(self) -> int:
        return self.H.shape[1]

    @property
    def rate(self) -> float:
        return self.k / self.n

    def _build_graph(self):
        chk, var = np.nonzero(self.H)
        self._edge_chk = chk
        self._edge_var = var
        E = chk.size
        m, n = self.H.shape
        dc = np.bincount(chk, minlength=m)
        dv = np.bincount(var, minlength=n)
        # padded adjacency; index E is a dummy edge
        self._chk_edges = np.full((m, dc.max()), E)
        self._var_edges = np.full((n, dv.max()), E)
        fill_c = np.zeros(m, dtype=int)
        fill_v = np.zeros(n, dtype=int)
        for e, (c, v) in enumerate(zip(chk, var)):
            self._chk_edges[c, fill_c[c]] = e
            fill_c[c] += 1
            self._var_edges[v, fill_v[v]] = e
            fill_v[v] += 1

    def encode(self, bits: np.ndarray) -> np.ndarray:
        """Systematic encoding of ``(..., k)`` info bits."""
        bits = np.asarray(bits, dtype=np.uint8)
        if bits.shape[-1] != self.k:
            raise ValueError(f"expected {self.k} info bits, got {bits.shape[-1]}")
        parity = (bits.astype(np.int64) @ self._parity_gen.T.astype(np.int64)) % 2
        return np.concatenate([bits, parity.astype(np.uint8)], axis=-1)

    def syndrome(self, codewords: np.ndarray) -> np.ndarray:
        return (np.asarray(codewords, dtype=np.int64) @ self.H.T.astype(np.int64)) % 2

    def decode(self, llrs: np.ndarray, max_iters: int = 50) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Sum-product belief propagation.

        ``llrs`` are ``log P(b=0)/P(b=1)`` with shape ``(..., n)``. Returns the
        hard-decided info bits, a per-codeword convergence flag and the
        posterior LLRs of the info bits. The flag reports BP convergence;
        when ``osd_order > 0`` codewords on which BP failed are finished by
        ordered-statistics decoding of the channel LLRs.
        """
        llrs = np.asarray(llrs, dtype=np.float64)
        lead = llrs.shape[:-1]
        if llrs.shape[-1] != self.n:
            raise ValueError(f"expected {self.n} llrs, got {llrs.shape[-1]}")
        L = np.clip(llrs.reshape(-1, self.n), -LLR_CLIP, LLR_CLIP)
        B = L.shape[0]
        E = self._edge_chk.size
        c2v = np.zeros((B, E + 1))
        post = L.copy()
        hard = (post < 0).astype(np.uint8)
        done = np.all(self.syndrome(hard) == 0, axis=1)
        for _ in range(max_iters):
            if done.all():
                break
            act = np.flatnonzero(~done)
            v2c = np.empty((act.size, E + 1))
            v2c[:, :E] = post[act][:, self._edge_var] - c2v[act, :E]
            v2c[:, E] = np.inf
            t = np.tanh(np.clip(v2c, -LLR_CLIP, LLR_CLIP) / 2.0)
            t[:, E] = 1.0
            tc = t[:, self._chk_edges]  # (b, m, dc)
            # leave-one-out product via prefix/suffix products
            pre = np.cumprod(np.concatenate([np.ones_like(tc[..., :1]), tc[..., :-1]], axis=-1), axis=-1)
            suf = np.cumprod(np.concatenate([np.ones_like(tc[..., :1]), tc[..., :0:-1]], axis=-1), axis=-1)[..., ::-1]
            loo = np.clip(pre * suf, -0.999999999999, 0.999999999999)
            msg = 2.0 * np.arctanh(loo)
            new = np.zeros((act.size, E + 1))
            new[:, self._chk_edges.ravel()] = msg.reshape(act.size, -1)
            new[:, E] = 0.0
            c2v[act] = new
            post[act] = L[act] + c2v[act][:, self._var_edges].sum(axis=-1)
            hard_a = (post[act] < 0).astype(np.uint8)
            hard[act] = hard_a
            done[act] = np.all(self.syndrome(hard_a) == 0, axis=1)
        if self.osd_order > 0:
            for b in np.flatnonzero(~done):
                hard[b] = self.osd(L[b], self.osd_order)
        info = hard[:, : self.k].reshape(*lead, self.k)
        return info, done.reshape(lead), post[:, : self.k].reshape(*lead, self.k)

    def osd(self, llr: np.ndarray, order: int = 2) -> np.ndarray:
        """Ordered-statistics decoding: re-encode the most reliable independent
        positions and test every flip pattern of weight <= ``order``, keeping
        the codeword with the smallest discrepancy to the hard decisions."""
        n, k = self.n, self.k
        G = np.concatenate([np.eye(k, dtype=np.uint8), self._parity_gen.T], axis=1)
        rel = np.argsort(-np.abs(llr), kind="stable")
        A = G[:, rel]
        piv = []
        row = 0
        for col in range(n):
            if row == k:
                break
            hits = np.flatnonzero(A[row:, col]) + row
            if hits.size == 0:
                continue
            if hits[0] != row:
                A[[row, hits[0]]] = A[[hits[0], row]]
            others = np.flatnonzero(A[:, col])
            others = others[others != row]
            A[others] ^= A[row]
            piv.append(col)
            row += 1
        hard = (llr[rel] < 0).astype(np.uint8)
        weight = np.abs(llr[rel])
        base = (hard[piv].astype(np.int64) @ A.astype(np.int64) % 2).astype(np.uint8)
        cands = [base[None]]
        if order >= 1:
            cands.append(base ^ A)
        if order >= 2:
            i, j = np.triu_indices(k, 1)
            cands.append(base ^ A[i] ^ A[j])
        C = np.concatenate(cands)
        cost = ((C != hard) * weight).sum(axis=1)
        out = np.empty(n, dtype=np.uint8)
        out[rel] = C[np.argmin(cost)]
        return out


@lru_cache(maxsize=None)
def index_code(seed: int = 0) -> LDPCCode:
    """Nominal rate-3/4 PEG code for one 128-bit index row.

    n = 174 fills exactly 29 64-QAM symbols. Column weight 4 on 47 checks;
    even column weights make one check redundant, so k = 128 (true rate
    0.736). BP failures are finished with order-2 OSD.
    """
    n, m = 174, 47
    rng = np.random.default_rng(seed)
    for _ in range(64):
        H = _peg_matrix(n, m, 4, rng)
        rank = len(_gf2_rref(H)[1])
        if n - rank == 128:
            return LDPCCode(H, 128, name="peg-3/4", seed=seed, osd_order=2)
    raise RuntimeError("could not build the index code")


@lru_cache(maxsize=None)
def baseline_code(k: int = 512, seed: int = 45) -> LDPCCode:
    """Rate-1/2 irregular repeat-accumulate code with DVB-S.2-style structure:
    degree-3 information columns and a dual-diagonal (staircase) parity part."""
    m = k
    rng = np.random.default_rng(seed)
    H = np.zeros((m, k + m), dtype=np.uint8)
    # spread info edges evenly over checks, no repeated check per column
    slots = np.tile(np.arange(m), 3)
    rng.shuffle(slots)
    for j in range(k):
        chosen = set()
        for s in range(3):
            c = int(slots[3 * j + s])
            while c in chosen:
                c = int(rng.integers(m))
            chosen.add(c)
            H[c, j] = 1
    idx = np.arange(m)
    H[idx, k + idx] = 1
    H[idx[1:], k + idx[:-1]] = 1
    return LDPCCode(H, k, name="ira-1/2", seed=seed)


def code_for_rate(rate: float) -> LDPCCode:
    if math.isclose(rate, 3 / 4):
        return index_code()
    if math.isclose(rate, 1 / 2):
        return baseline_code()
    raise ValueError(f"unsupported code rate {rate}")


def ldpc_encode(bits: np.ndarray, rate: float) -> np.ndarray:
    return code_for_rate(rate).encode(bits)


def ldpc_decode(llrs: np.ndarray, rate: float, max_iters: int = 50) -> tuple[np.ndarray, np.ndarray]:
    bits, ok, _ = code_for_rate(rate).decode(llrs, max_iters=max_iters)
    return bits, ok


# --------------------------------------------------------------------------
# Square QAM with Gray labelling
# --------------------------------------------------------------------------

def _gray_decode(g: np.ndarray) -> np.ndarray:
    i = g.copy()
    shift = g >> 1
    while np.any(shift):
        i ^= shift
        shift >>= 1
    return i


@lru_cache(maxsize=None)
def constellation(order: int) -> np.ndarray:
    """Points indexed by the integer value of their bit label (MSB first).

    The first half of the label drives the in-phase axis, the second half the
    quadrature axis. Label bit 0 on an axis maps to the positive half-plane,
    so 4-QAM label ``00`` is ``(1+1j)/sqrt(2)``.
    """
    if order not in (4, 16, 64, 256):
        raise ValueError(f"unsupported QAM order {order}")
    m = int(math.log2(order)) // 2
    side = 1 << m
    labels = np.arange(order)
    gi = labels >> m
    gq = labels & (side - 1)
    amp_i = (side - 1) - 2 * _gray_decode(gi)
    amp_q = (side - 1) - 2 * _gray_decode(gq)
    pts = amp_i + 1j * amp_q
    pts = pts / np.sqrt(2 * (order - 1) / 3)
    pts.setflags(write=False)
    return pts


def _label_bits(order: int) -> np.ndarray:
    nb = int(math.log2(order))
    labels = np.arange(order)
    return ((labels[:, None] >> np.arange(nb - 1, -1, -1)) & 1).astype(np.uint8)


def qam_map(bits: np.ndarray, order: int, table: np.ndarray | None = None) -> np.ndarray:
    """Map a flat bit vector to symbols; pads with zeros to a whole symbol."""
    table = constellation(order) if table is None else table
    nb = int(math.log2(order))
    bits = np.asarray(bits, dtype=np.uint8).ravel()
    pad = (-bits.size) % nb
    if pad:
        bits = np.concatenate([bits, np.zeros(pad, dtype=np.uint8)])
    groups = bits.reshape(-1, nb)
    labels = groups @ (1 << np.arange(nb - 1, -1, -1))
    return table[labels]


def qam_demap(symbols: np.ndarray, noise_var, order: int, table: np.ndarray | None = None) -> np.ndarray:
    """Max-log LLRs, positive favouring bit 0. ``noise_var`` may be a scalar or
    per-symbol array (complex noise variance)."""
    table = constellation(order) if table is None else table
    bits = _label_bits(order)
    y = np.asarray(symbols).ravel()
    nv = np.broadcast_to(np.asarray(noise_var, dtype=np.float64), np.asarray(symbols).shape).ravel()
    nv = np.maximum(nv, 1e-12)
    d = np.abs(y[:, None] - table[None, :]) ** 2  # (N, order)
    out = np.empty((y.size, bits.shape[1]))
    for b in range(bits.shape[1]):
        d0 = d[:, bits[:, b] == 0].min(axis=1)
        d1 = d[:, bits[:, b] == 1].min(axis=1)
        out[:, b] = (d1 - d0) / nv
    return out.ravel()


# --------------------------------------------------------------------------
# Pruning index side channel
# --------------------------------------------------------------------------

INDEX_RATE = 3 / 4
INDEX_ORDER = 64


def index_symbols_per_row(row_bits: int, pruned: bool = True) -> int:
    """Accounted index symbols per row, ceil(row_bits * 4/3 / 6)."""
    if not pruned:
        return 0
    return math.ceil(row_bits * (1 / INDEX_RATE) / math.log2(INDEX_ORDER) - 1e-12)


@dataclass
class CodedIndexFrame:
    symbols: np.ndarray  # complex, (rows, physical symbols per row)
    accounted_len: int   # L' used for rate accounting
    row_bits: int

    @property
    def rows(self) -> int:
        return self.symbols.shape[0]


def encode_index_matrix(mask: np.ndarray, code: LDPCCode | None = None) -> CodedIndexFrame:
    mask = np.asarray(mask, dtype=np.uint8)
    if mask.ndim != 2:
        raise ValueError("index matrix must be 2-D")
    rows, row_bits = mask.shape
    if rows == 0 or not mask.any():
        return CodedIndexFrame(np.zeros((rows, 0), dtype=complex), 0, row_bits)
    code = index_code() if code is None else code
    if row_bits > code.k:
        raise ValueError(f"row of {row_bits} bits exceeds code dimension {code.k}")
    info = np.zeros((rows, code.k), dtype=np.uint8)
    info[:, :row_bits] = mask
    cw = code.encode(info)
    syms = np.stack([qam_map(c, INDEX_ORDER) for c in cw])
    return CodedIndexFrame(syms, index_symbols_per_row(row_bits), row_bits)


def decode_index_matrix(symbols: np.ndarray, noise_var, row_bits: int, code: LDPCCode | None = None,
                        max_iters: int = 50) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (hard mask rows, per-row convergence, posterior LLRs)."""
    code = index_code() if code is None else code
    symbols = np.atleast_2d(symbols)
    rows = symbols.shape[0]
    nv = np.broadcast_to(np.asarray(noise_var, dtype=np.float64), symbols.shape)
    llr = qam_demap(symbols, nv, INDEX_ORDER).reshape(rows, -1)[:, : code.n].copy()
    # shortened info positions are known zeros
    llr[:, row_bits:code.k] = LLR_CLIP
    bits, ok, post = code.decode(llr, max_iters=max_iters)
    return bits[:, :row_bits], ok, post[:, :row_bits]


def dump_tables(stream: io.TextIOBase | None = None) -> str:
    """Text dump of constellations and parity-check matrices for test vectors.

    Format: ``# section`` headers followed by whitespace-separated rows.
    Constellation rows are ``label re im``; parity-check rows list the column
    indices of ones in systematic column order.
    """
    lines = []
    for order in (4, 64):
        lines.append(f"# qam order={order} gray=square unit_energy=1")
        for lab, p in enumerate(constellation(order)):
            lines.append(f"{lab} {p.real:.17g} {p.imag:.17g}")
    for code in (index_code(), baseline_code()):
        lines.append(f"# ldpc name={code.name} n={code.n} k={code.k} seed={code.seed}")
        for row in code.H:
            lines.append(" ".join(str(c) for c in np.flatnonzero(row)))
    text = "\n".join(lines) + "\n"
    if stream is not None:
        stream.write(text)
    return text
