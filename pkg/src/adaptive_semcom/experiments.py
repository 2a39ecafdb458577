"""Cached toy-scale training runs and the trend study built on them.

Runs are stored under ``<cache>/<config hash>/`` and reused when their
checkpoint has completed the whole schedule, so repeated test sessions only
pay for training once.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bench import DEFAULT_GRID, SweepReport, sweep
from .data import Dataset, ensure_dataset
from .train import TrainConfig, load_checkpoint, toy_config, train

log = logging.getLogger(__name__)

TREND_SEEDS = (0, 1, 2)
TREND_ALPHAS = (2e-4, 3e-4)
EVAL_IMAGES = 1000


def default_cache() -> Path:
    env = os.environ.get("ADAPTIVE_SEMCOM_CACHE")
    return Path(env) if env else Path.home() / ".cache" / "adaptive_semcom" / "runs"


def run_dir(cfg: TrainConfig, cache=None) -> Path:
    return Path(cache or default_cache()) / cfg.fingerprint()


def trained(cfg: TrainConfig, cache=None, data_root=None):
    """Checkpointed system for ``cfg``; trains (or finishes training) when needed."""
    d = run_dir(cfg, cache)
    ckpt = d / "last.npz"
    if ckpt.exists():
        system, _, meta, _ = load_checkpoint(ckpt)
        if meta["epoch"] >= cfg.total_epochs:
            return system, d
        log.info("resuming %s at epoch %d", d.name, meta["epoch"])
        return train(cfg, d, data_root, resume=ckpt).system, d
    return train(cfg, d, data_root).system, d


def eval_images(data_root=None, n: int = EVAL_IMAGES) -> np.ndarray:
    ds = Dataset(ensure_dataset(data_root), "test", n)
    return ds.batch(np.arange(len(ds))).pixels


def cached_sweep(cfg: TrainConfig, csi_mode: str, cache=None, data_root=None, grid=DEFAULT_GRID,
                 n_images: int = EVAL_IMAGES, seed: int = 0) -> SweepReport:
    system, d = trained(cfg, cache, data_root)
    name = f"sweep_{csi_mode}_n{n_images}_s{seed}_" + "_".join(str(g) for g in grid) + ".csv"
    path = d / name
    if path.exists():
        return SweepReport.from_csv(path.read_text())
    rep = sweep(system, eval_images(data_root, n_images), grid, csi_mode, seed=seed,
                fingerprint={"config_hash": cfg.fingerprint(), "train_seed": cfg.seed})
    rep.save(path)
    return rep


@dataclass
class TrendResult:
    name: str
    per_seed: dict          # seed -> bool
    detail: dict            # seed -> values compared

    @property
    def holds(self) -> bool:
        return sum(self.per_seed.values()) >= 2


def trend_study(cache=None, data_root=None, seeds=TREND_SEEDS, grid=DEFAULT_GRID) -> list[TrendResult]:
    """The four toy-scale trend checks, each evaluated per training seed."""
    a_lo, a_hi = TREND_ALPHAS
    res = {k: ({}, {}) for k in ("cpp_25_le_10", "ratio_low_ge_high", "imperfect_le_perfect", "alpha_cpp")}
    for s in seeds:
        lo = cached_sweep(toy_config(a_lo, s), "perfect", cache, data_root, grid)
        imp = cached_sweep(toy_config(a_lo, s), "imperfect", cache, data_root, grid)
        hi = cached_sweep(toy_config(a_hi, s), "perfect", cache, data_root, grid)
        c10, c25 = lo.row(10).mean_cpp, lo.row(25).mean_cpp
        res["cpp_25_le_10"][0][s] = c25 <= c10
        res["cpp_25_le_10"][1][s] = {"cpp10": c10, "cpp25": c25}
        r_low = np.mean([lo.row(0).mean_length_ratio_pct, lo.row(5).mean_length_ratio_pct])
        r_high = np.mean([lo.row(20).mean_length_ratio_pct, lo.row(25).mean_length_ratio_pct])
        res["ratio_low_ge_high"][0][s] = r_low >= r_high
        res["ratio_low_ge_high"][1][s] = {"ratio_0_5": r_low, "ratio_20_25": r_high}
        p_perf, p_imp = lo.column("mean_psnr"), imp.column("mean_psnr")
        res["imperfect_le_perfect"][0][s] = bool(np.all(p_imp <= p_perf))
        res["imperfect_le_perfect"][1][s] = {"perfect": p_perf.round(3).tolist(), "imperfect": p_imp.round(3).tolist()}
        m_lo, m_hi = lo.column("mean_cpp").mean(), hi.column("mean_cpp").mean()
        res["alpha_cpp"][0][s] = m_hi <= m_lo
        res["alpha_cpp"][1][s] = {"cpp_alpha2e-4": m_lo, "cpp_alpha3e-4": m_hi}
    return [TrendResult(k, {s: bool(v) for s, v in ok.items()}, det) for k, (ok, det) in res.items()]


def summary(results: list[TrendResult]) -> str:
    return json.dumps({r.name: {"holds": r.holds, "per_seed": r.per_seed, "detail": r.detail} for r in results},
                      indent=1, default=float)


def main():
    """Train every run of the trend study and print the result."""
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    print(summary(trend_study()))


if __name__ == "__main__":
    main()
