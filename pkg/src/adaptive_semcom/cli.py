"""Command-line entry point: train, sweep, simulate-channel, selftest, plot.

Environment overrides: ``ADAPTIVE_SEMCOM_DATA`` (dataset root) and
``ADAPTIVE_SEMCOM_OUT`` (output directory).

Exit codes: 0 success, 1 usage or configuration error, 2 selftest failure,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from . import channel as ch
from .link import CSI_MODES
from .train import TrainConfig

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_SELFTEST, EXIT_RUNTIME = 0, 1, 2, 3
TOP_KEYS = {"schema_version", "seed", "data_root", "output_dir", "train", "channel", "eval"}
CHANNEL_KEYS = {"users", "antennas", "snr_grid_db", "csi_mode"}
EVAL_KEYS = {"images", "policy", "frames_per_batch"}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    train: TrainConfig
    data_root: str
    output_dir: str = "runs"
    seed: int = 0
    snr_grid_db: tuple = (0, 5, 10, 15, 20, 25)
    csi_mode: str = "perfect"
    eval: dict = field(default_factory=lambda: {"images": 1000, "policy": "sample", "frames_per_batch": 128})

    @property
    def fingerprint(self) -> str:
        return self.train.fingerprint()

    def tag(self) -> str:
        return f"config_hash={self.fingerprint} seed={self.seed}"


def load_config(path, env=None) -> ExperimentConfig:
    """Parse and validate a YAML experiment file. All offending keys are
    reported together."""
    env = os.environ if env is None else env
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    problems = []
    if raw.get("schema_version") != SCHEMA_VERSION:
        problems.append(f"schema_version: expected {SCHEMA_VERSION}, got {raw.get('schema_version')!r}")
    problems += [f"{k}: unknown key" for k in sorted(set(raw) - TOP_KEYS)]
    chan = raw.get("channel") or {}
    problems += [f"channel.{k}: unknown key" for k in sorted(set(chan) - CHANNEL_KEYS)]
    ev = raw.get("eval") or {}
    problems += [f"eval.{k}: unknown key" for k in sorted(set(ev) - EVAL_KEYS)]

    data_root = env.get("ADAPTIVE_SEMCOM_DATA") or raw.get("data_root")
    if not data_root:
        problems.append("data_root: missing (set it in the config or ADAPTIVE_SEMCOM_DATA)")
    elif data_root != "synthetic" and not Path(data_root).is_dir():
        problems.append(f"data_root: directory does not exist: {data_root}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        problems.append("seed: must be an integer")
    if chan.get("csi_mode", "perfect") not in CSI_MODES:
        problems.append(f"channel.csi_mode: invalid value {chan.get('csi_mode')!r}")

    tr = dict(raw.get("train") or {})
    system = dict(tr.get("system") or {})
    for key, dst in (("users", "users"), ("antennas", "antennas")):
        if key in chan:
            system[dst] = chan[key]
    tr["system"] = system
    tr["seed"] = seed if isinstance(seed, int) else 0
    try:
        train_cfg = TrainConfig.from_dict(tr)
    except (TypeError, ValueError) as exc:
        problems.append(f"train: {exc}")
        train_cfg = None
    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))
    out = env.get("ADAPTIVE_SEMCOM_OUT") or raw.get("output_dir", "runs")
    evd = {"images": 1000, "policy": "sample", "frames_per_batch": 128} | ev
    return ExperimentConfig(train_cfg, data_root, out, seed, tuple(chan.get("snr_grid_db", (0, 5, 10, 15, 20, 25))),
                            chan.get("csi_mode", "perfect"), evd)


def _data_root(cfg: ExperimentConfig):
    from .data import ensure_dataset
    return ensure_dataset(None if cfg.data_root == "synthetic" else cfg.data_root)


def _out_dir(cfg: ExperimentConfig, override=None) -> Path:
    d = Path(override or cfg.output_dir) / f"{cfg.fingerprint}-s{cfg.seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


# -- commands ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    from .train import train
    cfg = load_config(args.config)
    out = _out_dir(cfg, args.out)
    root = _data_root(cfg)
    res = train(cfg.train, out, root, resume=args.resume, max_epochs=args.max_epochs)
    print(f"checkpoint: {res.checkpoint}\nmetrics: {res.metrics}\n{cfg.tag()}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .bench import plot_reports, sweep
    from .data import Dataset
    from .train import load_checkpoint
    cfg = load_config(args.config)
    system, ck_cfg, meta, _ = load_checkpoint(args.checkpoint)
    if meta["config_hash"] != cfg.fingerprint:
        print(f"warning: checkpoint config {meta['config_hash']} differs from {cfg.fingerprint}; proceeding",
              file=sys.stderr)
    out = _out_dir(cfg, args.out)
    ds = Dataset(_data_root(cfg), "test", cfg.eval["images"])
    images = ds.batch(np.arange(len(ds))).pixels
    csi_mode = args.csi_mode or cfg.csi_mode
    stem = f"sweep_{csi_mode}_{system.cfg.fingerprint()}_{cfg.fingerprint}_s{cfg.seed}"
    with open(out / f"{stem}.jsonl", "w") as traces:
        rep = sweep(system, images, cfg.snr_grid_db, csi_mode, seed=cfg.seed,
                    frames_per_batch=cfg.eval["frames_per_batch"], policy=cfg.eval["policy"],
                    trace_stream=traces, fingerprint={"config_hash": cfg.fingerprint,
                                                      "checkpoint_hash": meta["config_hash"]})
    rep.save(out / f"{stem}.csv")
    plot_reports({csi_mode: rep}, out / f"{stem}.png", title=cfg.tag())
    print(rep.to_csv())
    return EXIT_OK


def simulate_channel(antennas: int, users: int, grid, trials: int, length: int, seed: int):
    """Detector MSE (after per-stream rescaling) versus SNR for perfect and
    LS-estimated CSI. Returns rows of (snr_db, csi, mse, snr_hat_db)."""
    from .link import Streams, acquire_csi
    rows = []
    for i, snr in enumerate(grid):
        for mode in ("perfect", "ls"):
            st = Streams(seed * 1000 + i)
            H = ch.sample_channel(antennas, users, st.channel, (trials,), torch.complex128)
            nv = ch.noise_var_for_snr(H, torch.tensor(float(snr)))
            bits = torch.randint(0, 2, (trials, length, users, 2), generator=st.noise).double()
            Z = torch.complex(1 - 2 * bits[..., 0], 1 - 2 * bits[..., 1]) / np.sqrt(2)
            H_hat, _, snr_hat = acquire_csi(H, nv, float(snr), mode, st.csi)
            Y = ch.transmit(Z, H, nv, st.noise)
            W = ch.lmmse_filter(H_hat, nv)
            g = torch.diagonal(W @ H_hat, dim1=-2, dim2=-1)
            Z_hat = (W @ Y) / g.unsqueeze(-1)
            mse = float((Z_hat - Z.transpose(-1, -2)).abs().pow(2).mean())
            rows.append((float(snr), mode, mse, float(torch.as_tensor(snr_hat).mean())))
    return rows


def cmd_simulate_channel(args) -> int:
    rows = simulate_channel(args.antennas, args.users, args.grid, args.trials, args.length, args.seed)
    out = Path(args.out) if args.out else None
    lines = [f"# antennas={args.antennas} users={args.users} trials={args.trials} seed={args.seed}",
             "snr_db,csi,detector_mse,mean_snr_hat_db"]
    lines += [f"{s!r},{m},{e!r},{h!r}" for s, m, e, h in rows]
    text = "\n".join(lines) + "\n"
    if out:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from . import selftest
    res = selftest.run(corrupt_constellation=args.corrupt_constellation)
    print(selftest.format_table(res))
    return EXIT_OK if all(ok for _, ok, _, _ in res) else EXIT_SELFTEST


def cmd_plot(args) -> int:
    from .bench import SweepReport, plot_reports
    reps = {Path(p).stem: SweepReport.from_csv(Path(p).read_text()) for p in args.reports}
    first = next(iter(reps.values())).fingerprint
    title = " ".join(f"{k}={first[k]}" for k in ("config_hash", "seed") if k in first)
    path = plot_reports(reps, args.out, title=title)
    print(path)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _grid(text):
    return [float(v) for v in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="adaptive-semcom", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run the staged training schedule")
    t.add_argument("config", help="YAML experiment file")
    t.add_argument("--out", help="output directory (default: config output_dir)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--max-epochs", type=int, help="stop after this many epochs")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sweep", help="evaluate a checkpoint over the SNR grid")
    s.add_argument("config", help="YAML experiment file")
    s.add_argument("checkpoint", help="checkpoint .npz")
    s.add_argument("--csi-mode", choices=("perfect", "ls", "imperfect"), help="override the config CSI mode")
    s.add_argument("--out", help="output directory")
    s.set_defaults(fn=cmd_sweep)

    c = sub.add_parser("simulate-channel", help="CSV of detector MSE over an SNR sweep")
    c.add_argument("--antennas", type=int, default=2, help="receive antennas M")
    c.add_argument("--users", type=int, default=2, help="users K")
    c.add_argument("--grid", type=_grid, default=[0, 5, 10, 15, 20, 25], help="comma separated SNRs in dB")
    c.add_argument("--trials", type=int, default=200, help="fading blocks per SNR")
    c.add_argument("--length", type=int, default=512, help="QPSK symbols per user and block")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", help="write the CSV here as well")
    c.set_defaults(fn=cmd_simulate_channel)

    st = sub.add_parser("selftest", help="fast invariant checks")
    st.add_argument("--corrupt-constellation", action="store_true", help="inject a 64-QAM table fault")
    st.set_defaults(fn=cmd_selftest)

    pl = sub.add_parser("plot", help="plot PSNR and CPP curves from sweep CSVs")
    pl.add_argument("reports", nargs="+", help="sweep CSV files")
    pl.add_argument("--out", required=True, help="image file")
    pl.set_defaults(fn=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        logging.getLogger(__name__).debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
