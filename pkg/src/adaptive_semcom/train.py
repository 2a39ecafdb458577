"""Loss, temperature schedule, staged training and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .bench import psnr
from .data import Dataset, ensure_dataset
from .link import SemComSystem, Streams, SystemConfig, train_forward

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
GROUPS = ("CEM", "CAEM", "CADM", "CDM", "P1", "P2")


@dataclass
class Stage:
    epochs: int
    lr: float
    frozen: tuple[str, ...] = ()


FULL_STAGES = (
    Stage(150, 1e-3),
    Stage(100, 1e-4),
    Stage(150, 1e-5, ("CEM", "P2")),
    Stage(100, 1e-5, ("CAEM", "P1")),
)


@dataclass
class TrainConfig:
    system: SystemConfig = field(default_factory=SystemConfig)
    alpha: float = 2e-4
    beta: float = 1e-5
    weight_decay: float = 5e-4
    decoupled_decay: bool = True   # AdamW-style; False adds the decay to the gradient (Adam L2)
    batch_size: int = 512
    snr_range_db: tuple[float, float] = (0.0, 25.0)
    tau0: float = 5.0
    tau_decay: float = 0.01
    tau_min: float = 0.5
    stages: tuple[Stage, ...] = FULL_STAGES
    epoch_scale: float = 1.0
    policy_warmup: int = 0      # leading epochs (unscaled) with random selection/pruning
    subset: int | None = None
    csi_mode: str = "perfect"
    seed: int = 0
    keep_checkpoints: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.batch_size < self.system.users:
            raise ValueError("batch must hold at least one frame")
        for st in self.stages:
            bad = set(st.frozen) - set(GROUPS)
            if bad:
                raise ValueError(f"unknown parameter groups {sorted(bad)}")

    def stage_epochs(self) -> list[int]:
        return [max(1, round(s.epochs * self.epoch_scale)) for s in self.stages]

    @property
    def total_epochs(self) -> int:
        return sum(self.stage_epochs())

    @property
    def warmup_epochs(self) -> int:
        return round(self.policy_warmup * self.epoch_scale)

    def stage_at(self, epoch: int) -> tuple[int, Stage]:
        acc = 0
        for i, (n, st) in enumerate(zip(self.stage_epochs(), self.stages)):
            acc += n
            if epoch < acc:
                return i, st
        raise IndexError(epoch)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [asdict(s) | {"frozen": list(s.frozen)} for s in self.stages]
        d["snr_range_db"] = list(self.snr_range_db)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys {sorted(unknown)}")
        if "system" in d:
            sys_known = {f.name for f in fields(SystemConfig)}
            bad = set(d["system"]) - sys_known
            if bad:
                raise ValueError(f"unknown system keys {sorted(bad)}")
            d["system"] = SystemConfig(**d["system"])
        if "stages" in d:
            d["stages"] = tuple(Stage(s["epochs"], s["lr"], tuple(s.get("frozen", ()))) for s in d["stages"])
        if "snr_range_db" in d:
            d["snr_range_db"] = tuple(d["snr_range_db"])
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def toy_config(alpha: float = 2e-4, seed: int = 0, **overrides) -> TrainConfig:
    """Desk-scale profile: 5k images, batch 128, epochs x0.1, narrower codec,
    and a codec warm-up with random rate choices before the policies learn."""
    kw = dict(system=SystemConfig(width=64), batch_size=128, subset=5000, epoch_scale=0.1, policy_warmup=50)
    kw.update(overrides)
    return TrainConfig(alpha=alpha, seed=seed, **kw)


def anneal_tau(epoch: int, tau0: float = 5.0, decay: float = 0.01, floor: float = 0.5) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return max(tau0 * math.exp(-decay * epoch), floor)


# -- loss ---------------------------------------------------------------------------

def distortion_term(x, x_hat):
    return torch.mean((x - x_hat) ** 2)


def rate_term(len_ratio, count, alpha):
    return alpha * torch.mean(len_ratio * count)


def entropy_term(entropies, beta):
    """-beta * (1/C) * sum_i exp(H_i), averaged over images."""
    return -beta * torch.mean(torch.exp(entropies).mean(-1))


def loss_terms(x, x_hat, soft_count, len_ratio, entropies, alpha: float, beta: float) -> dict[str, torch.Tensor]:
    terms = {"mse": distortion_term(x, x_hat), "rate": rate_term(len_ratio, soft_count, alpha),
             "entropy": entropy_term(entropies, beta)}
    terms["total"] = terms["mse"] + terms["rate"] + terms["entropy"]
    return terms


def loss(x, x_hat, soft_count, len_ratio, entropies, alpha: float, beta: float) -> torch.Tensor:
    return loss_terms(x, x_hat, soft_count, len_ratio, entropies, alpha, beta)["total"]


# -- checkpoints ---------------------------------------------------------------------

class CheckpointError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, last_checkpoint):
        super().__init__(f"loss became non-finite in epoch {epoch}; last good checkpoint: {last_checkpoint}")
        self.epoch = epoch
        self.last_checkpoint = last_checkpoint


def save_checkpoint(path, system: SemComSystem, cfg: TrainConfig, epoch: int, optimizer=None,
                    rng: dict | None = None, stage: int = 0):
    """Named arrays plus a JSON ``meta`` entry; ``epoch`` counts completed epochs."""
    arrays = {}
    shapes = {}
    for name, t in system.state_dict().items():
        arrays[f"param/{name}"] = t.detach().cpu().numpy()
        shapes[name] = list(t.shape)
    if optimizer is not None:
        names = {id(p): n for n, p in system.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                for key, val in optimizer.state.get(p, {}).items():
                    arrays[f"opt/{names[id(p)]}/{key}"] = torch.as_tensor(val).cpu().numpy()
    for name, state in (rng or {}).items():
        arrays[f"rng/{name}"] = state.numpy()
    meta = {"format_version": FORMAT_VERSION, "config": cfg.to_dict(), "config_hash": cfg.fingerprint(),
            "seed": cfg.seed, "epoch": epoch, "stage": stage, "shapes": shapes}
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)
    return path


def load_checkpoint(path, system: SemComSystem | None = None):
    """Returns (system, config, meta, arrays). Builds the system from the
    stored config when none is given."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"missing checkpoint: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
        meta = json.loads(str(arrays["meta"]))
    except (OSError, ValueError, KeyError, EOFError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {meta.get('format_version')}")
    cfg = TrainConfig.from_dict(meta["config"])
    if system is None:
        system = SemComSystem(cfg.system)
    state = {k[len("param/"):]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith("param/")}
    for name, shape in meta["shapes"].items():
        if list(state[name].shape) != shape:
            raise CheckpointError(f"shape mismatch for {name}")
    system.load_state_dict(state)
    return system, cfg, meta, arrays


# -- training ------------------------------------------------------------------------

METRIC_COLUMNS = ("epoch", "stage", "lr", "tau", "loss", "mse", "rate", "entropy", "first_loss",
                  "mean_cpp", "mean_c_hat", "mean_psnr")


@dataclass
class TrainResult:
    system: SemComSystem
    checkpoint: Path
    metrics: Path
    history: list[dict]


def set_frozen(system: SemComSystem, frozen) -> list[torch.nn.Parameter]:
    """Freeze the named groups; returns the trainable parameters."""
    frozen_ids = set()
    for name, mod in system.groups().items():
        on = name in frozen
        for p in mod.parameters():
            p.requires_grad_(not on)
            if on:
                frozen_ids.add(id(p))
    return [p for p in system.parameters() if id(p) not in frozen_ids]


def _optimizer(params, lr, wd, decoupled=True):
    if decoupled:
        return torch.optim.AdamW(params, lr=lr, weight_decay=wd)
    return torch.optim.Adam(params, lr=lr, weight_decay=wd)


def _restore_optimizer(opt, system, arrays):
    names = {id(p): n for n, p in system.named_parameters()}
    for group in opt.param_groups:
        for p in group["params"]:
            prefix = f"opt/{names[id(p)]}/"
            st = {k[len(prefix):]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith(prefix)}
            if st:
                opt.state[p] = st


def _frames(batch, users):
    x = torch.as_tensor(batch.pixels)
    n = (len(x) // users) * users
    return x[:n].reshape(n // users, users, *x.shape[1:])


def train(cfg: TrainConfig, out_dir, data_root=None, resume=None, max_epochs: int | None = None,
          dataset: Dataset | None = None) -> TrainResult:
    """Run (or continue) the staged schedule. Writes ``last.npz`` every
    epoch, ``metrics.csv`` and ``config.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    system = SemComSystem(cfg.system)
    streams = Streams(cfg.seed)
    snr_gen = torch.Generator().manual_seed(cfg.seed + 31337)
    start_epoch, arrays, ckpt_stage = 0, None, None
    if resume is not None:
        system, _, meta, arrays = load_checkpoint(resume, system)
        start_epoch, ckpt_stage = meta["epoch"], meta["stage"]
        rng = {k[4:]: v for k, v in arrays.items() if k.startswith("rng/")}
        streams.set_state(rng)
        snr_gen.set_state(torch.as_tensor(rng["snr"]))
    if dataset is None:
        dataset = Dataset(ensure_dataset(data_root), "train", cfg.subset)

    tag = f"config_hash={cfg.fingerprint()} seed={cfg.seed}"
    (out / "config.json").write_text(json.dumps(cfg.to_dict() | {"config_hash": cfg.fingerprint()},
                                                indent=2, sort_keys=True))
    metrics_path = out / "metrics.csv"
    history = []
    if resume is None or not metrics_path.exists():
        with open(metrics_path, "w", newline="") as fh:
            fh.write(f"# {tag}\n")
            csv.writer(fh, lineterminator="\n").writerow(METRIC_COLUMNS)

    last = out / "last.npz"
    end = cfg.total_epochs if max_epochs is None else min(cfg.total_epochs, start_epoch + max_epochs)
    opt, opt_stage = None, None
    lo, hi = cfg.snr_range_db
    beta = cfg.beta if cfg.system.entropy else 0.0
    users = cfg.system.users
    for epoch in range(start_epoch, end):
        stage_idx, stage = cfg.stage_at(epoch)
        if opt_stage != stage_idx:
            params = set_frozen(system, stage.frozen)
            opt = _optimizer(params, stage.lr, cfg.weight_decay, cfg.decoupled_decay)
            if arrays is not None and ckpt_stage == stage_idx:
                _restore_optimizer(opt, system, arrays)
            opt_stage = stage_idx
        tau = anneal_tau(epoch, cfg.tau0, cfg.tau_decay, cfg.tau_min)
        system.train()
        acc = {k: 0.0 for k in ("loss", "mse", "rate", "entropy", "cpp", "c_hat", "psnr")}
        n_img = 0
        first = None
        for batch in dataset.batches(cfg.batch_size, cfg.seed, epoch):
            x = _frames(batch, users)
            if len(x) == 0:
                continue
            snr = lo + (hi - lo) * torch.rand(len(x), generator=snr_gen, dtype=torch.float64)
            o = train_forward(system, x, snr, tau, streams, cfg.csi_mode,
                              random_policy=epoch < cfg.warmup_epochs)
            t = loss_terms(x, o.x_hat, o.soft_count, o.soft_len_ratio, o.soft_entropy, cfg.alpha, beta)
            if not torch.isfinite(t["total"]):
                raise TrainingDiverged(epoch, last if last.exists() else None)
            opt.zero_grad(set_to_none=True)
            t["total"].backward()
            opt.step()
            b = x.shape[0] * users
            first = float(t["total"].detach()) if first is None else first
            for k in ("mse", "rate", "entropy"):
                acc[k] += float(t[k].detach()) * b
            acc["loss"] += float(t["total"].detach()) * b
            acc["cpp"] += float(o.cpp.sum())
            acc["c_hat"] += float(o.count.sum())
            xd, xh = x.detach().reshape(b, -1).numpy(), o.x_hat.detach().reshape(b, -1).numpy()
            acc["psnr"] += sum(psnr(a, c) for a, c in zip(xd, xh))
            n_img += b
        row = {"epoch": epoch, "stage": stage_idx, "lr": stage.lr, "tau": tau, "first_loss": first}
        row.update({k: acc[k] / max(n_img, 1) for k in ("loss", "mse", "rate", "entropy")})
        row.update(mean_cpp=acc["cpp"] / max(n_img, 1), mean_c_hat=acc["c_hat"] / max(n_img, 1),
                   mean_psnr=acc["psnr"] / max(n_img, 1))
        history.append(row)
        with open(metrics_path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                                                         for c in METRIC_COLUMNS])
        log.info("epoch %d stage %d loss %.5f psnr %.2f cpp %.3f", epoch, stage_idx, row["loss"],
                 row["mean_psnr"], row["mean_cpp"])
        rng = dict(streams.get_state(), snr=snr_gen.get_state())
        save_checkpoint(last, system, cfg, epoch + 1, opt, rng, stage_idx)
        if cfg.keep_checkpoints:
            save_checkpoint(out / f"epoch_{epoch + 1:04d}.npz", system, cfg, epoch + 1, opt, rng, stage_idx)
    set_frozen(system, ())
    return TrainResult(system, last, metrics_path, history)


def with_alpha(cfg: TrainConfig, alpha: float) -> TrainConfig:
    return replace(cfg, alpha=alpha)
