"""Fast invariant checks run by ``adaptive-semcom selftest``."""

from __future__ import annotations

import time

import numpy as np
import torch

from . import channel as ch
from . import fec
from .link import cpp_user
from .policy import prune_l1, thermometer, unprune


def check_thermometer():
    for i in range(9):
        hot = np.zeros(9, dtype=int)
        hot[i] = 1
        m = thermometer(hot)
        expect = np.array([0] * i + [1] * (8 - i)) if i < 8 else np.zeros(8, dtype=int)
        assert np.array_equal(m, expect), f"hot at {i + 1}: {m}"


def check_pruning(rows: int = 200, seed: int = 0):
    rng = np.random.default_rng(seed)
    for a in (0.0, 0.2, 0.3, 0.4, 0.5):
        for row in rng.standard_normal((rows, 128)):
            packed, mask = prune_l1(row[None], a)
            n = int(np.floor(a * 128 + 1e-9))
            ranked = sorted(range(128), key=lambda j: (abs(row[j]), j))
            assert set(np.flatnonzero(mask[0])) == set(ranked[:n])
            back = unprune(packed, mask)[0]
            assert np.array_equal(back[mask[0] == 0], row[mask[0] == 0])


def check_ls(seed: int = 0):
    g = torch.Generator().manual_seed(seed)
    for M, K in ((2, 2), (4, 2), (4, 4)):
        H = ch.sample_channel(M, K, g, (), torch.complex128)
        P = ch.make_pilots(K, ch.pilot_length(512, K), torch.complex128)
        H_hat = ch.ls_estimate(ch.send_pilots(H, P, 0.0), P)
        assert torch.linalg.norm(H_hat - H) / torch.linalg.norm(H) < 1e-6


def check_cpp():
    assert cpp_user(8, 128, 0) == 0.5
    assert abs(cpp_user(5.65, 0.59 * 128, 29) - 0.288) <= 1e-3
    assert fec.index_symbols_per_row(128) == 29


def check_fec(table4=None, table64=None, seed: int = 0):
    rng = np.random.default_rng(seed)
    for order, table in ((4, table4), (64, table64)):
        bits = rng.integers(0, 2, 600 if order == 4 else 612).astype(np.uint8)
        llr = fec.qam_demap(fec.qam_map(bits, order, table), 1e-6, order)
        assert np.array_equal((llr < 0).astype(np.uint8)[: bits.size], bits), f"{order}-QAM round trip"
    for rate in (3 / 4, 1 / 2):
        code = fec.code_for_rate(rate)
        info = rng.integers(0, 2, (4, code.k)).astype(np.uint8)
        cw = code.encode(info)
        assert not code.syndrome(cw).any()
        llr = np.where(cw == 0, 10.0, -10.0)
        dec, ok, _ = code.decode(llr)
        assert ok.all() and np.array_equal(dec, info), f"LDPC rate {rate} round trip"


CHECKS = {
    "thermometer exhaustive": check_thermometer,
    "pruning oracle": check_pruning,
    "LS recovery": check_ls,
    "CPP accounting": check_cpp,
    "FEC/QAM round trip": check_fec,
}


def run(corrupt_constellation: bool = False) -> list[tuple[str, bool, float, str]]:
    """Returns (name, ok, seconds, message) per check. ``corrupt_constellation``
    swaps two 64-QAM points to demonstrate fault detection."""
    results = []
    for name, fn in CHECKS.items():
        kwargs = {}
        if corrupt_constellation and fn is check_fec:
            t = fec.constellation(64).copy()
            t[[0, 1]] = t[[1, 0]]
            kwargs = {"table64": t}
        t0 = time.perf_counter()
        try:
            fn(**kwargs)
            ok, msg = True, ""
        except AssertionError as exc:
            ok, msg = False, str(exc) or "assertion failed"
        results.append((name, ok, time.perf_counter() - t0, msg))
    return results


def format_table(results) -> str:
    w = max(len(r[0]) for r in results)
    lines = [f"{'check':<{w}}  result  seconds"]
    for name, ok, sec, msg in results:
        lines.append(f"{name:<{w}}  {'PASS' if ok else 'FAIL'}    {sec:7.3f}" + (f"  {msg}" if msg else ""))
    return "\n".join(lines)


__all__ = ["run", "format_table", "CHECKS"]
